//! `p2pwallet` — peer-to-peer offline payments over UDP, plus the office
//! tooling, the deterministic simulator, and log inspection.
//!
//! Exit codes: 0 committed/success, 2 aborted (or a red verdict), 3
//! configuration error, 4 transport error.

mod datadir;
mod runtime;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use p2pwallet_core::commit::{ProtocolConfig, TimeoutPolicy};
use p2pwallet_core::envelope::reference::ReferenceSuite;
use p2pwallet_core::envelope::toy::ToySuite;
use p2pwallet_core::envelope::CryptoSuite;
use p2pwallet_core::node::{Node, NodeEvent, NodeStore, SaleOutcome, SecretMode};
use p2pwallet_core::sim::explore::{explore_exhaustive, ExploreBounds};
use p2pwallet_core::sim::script::parse_sim_file;
use p2pwallet_core::sim::run_scenario;
use p2pwallet_core::stable_log::{recover_summary, scan_bytes, RecordBody};
use p2pwallet_core::wallet::{ChargeVoucher, Mode, TxnOutcome, WalletState};
use p2pwallet_core::{MoneyAmount, NodeId};

use datadir::{has_wallet, load_office, load_or_create_office, open_log, save_office, FileStore};
use runtime::{EnvFailpoint, Runtime};

#[derive(Parser)]
#[command(name = "p2pwallet", version, about = "Peer-to-peer offline payment node")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataDirArg {
    /// Node data directory (wallet, key file, durable log).
    #[arg(long, env = "P2PWALLET_DATA_DIR")]
    data_dir: PathBuf,
}

#[derive(Args, Clone)]
struct SuiteArg {
    /// Cryptographic suite: "reference" (RSA-2048 + AES-256-CTR + SHA-256)
    /// or "toy" (deterministic, NOT SECURE, for tests). Must match the
    /// suite the office used at provisioning time.
    #[arg(long, default_value = "reference")]
    suite: String,
}

#[derive(Args, Clone)]
struct ProtocolArgs {
    /// Protocol timer duration in milliseconds.
    #[arg(long, default_value_t = 500)]
    timeout_ms: u64,
    /// COMMIT-REQUEST retransmissions before aborting.
    #[arg(long, default_value_t = 3)]
    retries: u32,
    /// COMMIT/ABORT retransmissions before parking the transaction.
    #[arg(long, default_value_t = 16)]
    commit_retries: u32,
    /// Abort on the first prepare-phase timeout instead of retransmitting.
    #[arg(long)]
    abort_immediately: bool,
}

impl ProtocolArgs {
    fn config(&self) -> ProtocolConfig {
        ProtocolConfig {
            max_prepare_retries: self.retries,
            max_commit_retries: self.commit_retries,
            timeout_units: 2,
            timeout_policy: if self.abort_immediately {
                TimeoutPolicy::AbortImmediately
            } else {
                TimeoutPolicy::RetryThenAbort
            },
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Charging office: provision wallets and issue signed vouchers.
    Office {
        #[command(subcommand)]
        command: OfficeCommand,
    },
    /// Local wallet operations.
    Wallet {
        #[command(subcommand)]
        command: WalletCommand,
    },
    /// Sell: discover the buyer, quote, and run the atomic transfer.
    Sell(SellArgs),
    /// Buy: answer lookups and take part in transfers.
    Buy(BuyArgs),
    /// Deterministic fault-injecting simulator.
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
    /// Durable log tooling.
    Log {
        #[command(subcommand)]
        command: LogCommand,
    },
}

#[derive(Subcommand)]
enum OfficeCommand {
    /// Provision a fresh wallet for a node id and record its key.
    Provision {
        node_id: String,
        /// Office state directory.
        #[arg(long, default_value = "office")]
        office_dir: PathBuf,
        #[command(flatten)]
        data_dir: DataDirArg,
        #[command(flatten)]
        suite: SuiteArg,
    },
    /// Issue a signed charge voucher for a provisioned node.
    Charge {
        node_id: String,
        amount: u64,
        #[arg(long, default_value = "office")]
        office_dir: PathBuf,
        /// Voucher output file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        suite: SuiteArg,
    },
}

#[derive(Subcommand)]
enum WalletCommand {
    /// Print balance and reservation.
    Balance {
        #[command(flatten)]
        data_dir: DataDirArg,
    },
    /// Redeem a charge voucher file into the wallet balance.
    Redeem {
        voucher: PathBuf,
        #[command(flatten)]
        data_dir: DataDirArg,
        #[command(flatten)]
        suite: SuiteArg,
    },
    /// List finalized transactions from the wallet history.
    History {
        #[command(flatten)]
        data_dir: DataDirArg,
    },
}

#[derive(Args)]
struct SellArgs {
    /// Price in minor units.
    #[arg(long)]
    amount: u64,
    /// The buyer's node id.
    #[arg(long)]
    buyer: String,
    /// Human description of the goods.
    #[arg(long, default_value = "goods")]
    desc: String,
    /// UDP port to bind (0 = ephemeral).
    #[arg(long, default_value_t = 0)]
    port: u16,
    /// Known peer addresses (repeatable). Lookups go here too.
    #[arg(long = "peer")]
    peers: Vec<SocketAddr>,
    /// Send lookups as limited broadcast to this port.
    #[arg(long)]
    broadcast_port: Option<u16>,
    /// Give up after this many seconds without a conclusion.
    #[arg(long, default_value_t = 60)]
    max_seconds: u64,
    #[command(flatten)]
    data_dir: DataDirArg,
    #[command(flatten)]
    suite: SuiteArg,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

#[derive(Args)]
struct BuyArgs {
    /// Stay available for purchases (buyer mode).
    #[arg(long)]
    listen: bool,
    /// UDP port to listen on.
    #[arg(long, default_value_t = 7130)]
    port: u16,
    /// Keep serving after a concluded purchase instead of exiting.
    #[arg(long)]
    forever: bool,
    /// After a conclusion, keep answering duplicates this long before
    /// exiting.
    #[arg(long, default_value_t = 1500)]
    linger_ms: u64,
    #[command(flatten)]
    data_dir: DataDirArg,
    #[command(flatten)]
    suite: SuiteArg,
    #[command(flatten)]
    protocol: ProtocolArgs,
}

#[derive(Subcommand)]
enum SimCommand {
    /// Run a scenario from a config file and write the trace.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Trace output file.
        #[arg(long, default_value = "trace.txt")]
        trace: PathBuf,
    },
    /// Exhaustively explore fault schedules within bounds.
    Explore {
        /// Bounds as "losses,duplications,crashes".
        #[arg(long)]
        bounds: String,
        /// "retry-then-abort", "abort-immediately", or "both".
        #[arg(long, default_value = "both")]
        policy: String,
        #[arg(long, default_value_t = 40)]
        amount: u64,
        #[arg(long, default_value_t = 100)]
        balance: u64,
        /// Prepare-phase retransmission bound during exploration.
        #[arg(long, default_value_t = 2)]
        retries: u32,
        /// Commit/abort retransmission bound during exploration.
        #[arg(long, default_value_t = 3)]
        commit_retries: u32,
        /// State budget before the exploration refuses to continue.
        #[arg(long, default_value_t = 4_000_000)]
        max_states: usize,
    },
}

#[derive(Subcommand)]
enum LogCommand {
    /// Pretty-print a durable log and its recovery classification.
    Inspect { file: PathBuf },
}

fn make_suite(name: &str) -> Result<Arc<dyn CryptoSuite + Send + Sync>> {
    match name {
        "toy" => Ok(Arc::new(ToySuite)),
        "reference" => Ok(Arc::new(ReferenceSuite)),
        other => bail!("unknown suite {other:?} (expected \"toy\" or \"reference\")"),
    }
}

fn parse_node_id(text: &str) -> Result<NodeId> {
    NodeId::from_name(text)
        .ok_or_else(|| anyhow!("invalid node id {text:?}: use up to 16 ASCII bytes or 32 hex digits"))
}

fn entropy_rng() -> ChaCha20Rng {
    ChaCha20Rng::from_entropy()
}

const EXIT_OK: u8 = 0;
const EXIT_ABORTED: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_TRANSPORT: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        let _ = e.print();
        std::process::exit(EXIT_CONFIG as i32);
    });
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify_error(&e))
        }
    }
}

fn classify_error(e: &anyhow::Error) -> u8 {
    let text = format!("{e:#}");
    if text.contains("bind UDP") {
        EXIT_TRANSPORT
    } else {
        EXIT_CONFIG
    }
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Office { command } => office(command),
        Command::Wallet { command } => wallet(command),
        Command::Sell(args) => sell(args),
        Command::Buy(args) => buy(args),
        Command::Sim { command } => sim(command),
        Command::Log { command } => log_tool(command),
    }
}

// ── office ──

fn office(command: OfficeCommand) -> Result<u8> {
    match command {
        OfficeCommand::Provision {
            node_id,
            office_dir,
            data_dir,
            suite,
        } => {
            let id = parse_node_id(&node_id)?;
            let suite = make_suite(&suite.suite)?;
            let mut rng = entropy_rng();
            if has_wallet(&data_dir.data_dir) {
                bail!(
                    "{} already holds a wallet",
                    data_dir.data_dir.display()
                );
            }
            std::fs::create_dir_all(&data_dir.data_dir).context("create data dir")?;
            let mut office = load_or_create_office(&office_dir, suite.as_ref(), &mut rng)?;
            let wallet = office
                .provision(suite.as_ref(), &mut rng, id)
                .context("provision")?;
            save_office(&office_dir, &office)?;
            // Node::create persists the wallet, key file, and log header.
            let store = FileStore::new(&data_dir.data_dir);
            let log = open_log(&data_dir.data_dir)?;
            Node::create(
                wallet,
                log,
                store,
                ProtocolConfig::default(),
                suite,
                entropy_rng(),
                SecretMode::Rng,
            )
            .map_err(|e| anyhow!("initialize node state: {e}"))?;
            println!("provisioned {id} into {}", data_dir.data_dir.display());
            Ok(EXIT_OK)
        }
        OfficeCommand::Charge {
            node_id,
            amount,
            office_dir,
            out,
            suite,
        } => {
            let id = parse_node_id(&node_id)?;
            let suite = make_suite(&suite.suite)?;
            let mut office = load_office(&office_dir)?;
            let voucher = office
                .issue_charge(suite.as_ref(), id, MoneyAmount::new(amount))
                .map_err(|e| anyhow!("{e}"))?;
            save_office(&office_dir, &office)?;
            let path = out.unwrap_or_else(|| {
                PathBuf::from(format!("voucher-{}-{}.pvch", id, voucher.serial))
            });
            std::fs::write(&path, voucher.to_bytes()).context("write voucher")?;
            println!(
                "voucher serial {} for {} over {} written to {}",
                voucher.serial,
                id,
                amount,
                path.display()
            );
            Ok(EXIT_OK)
        }
    }
}

// ── wallet ──

fn load_wallet(dir: &PathBuf) -> Result<(WalletState, FileStore)> {
    let store = FileStore::new(dir);
    let bytes = store
        .load_wallet()
        .map_err(|e| anyhow!("{e}"))?
        .ok_or_else(|| anyhow!("no wallet in {}; provision first", dir.display()))?;
    let key_bytes = store
        .load_keys()
        .map_err(|e| anyhow!("{e}"))?
        .ok_or_else(|| anyhow!("wallet key file missing in {}", dir.display()))?;
    let private = WalletState::keys_from_bytes(&key_bytes).map_err(|e| anyhow!("{e}"))?;
    let wallet = WalletState::from_bytes(&bytes, private).map_err(|e| anyhow!("{e}"))?;
    Ok((wallet, store))
}

fn wallet(command: WalletCommand) -> Result<u8> {
    match command {
        WalletCommand::Balance { data_dir } => {
            let (wallet, _) = load_wallet(&data_dir.data_dir)?;
            println!("{}", wallet.balance);
            eprintln!(
                "node {} balance {} reserved {} spendable {}",
                wallet.node,
                wallet.balance,
                wallet.reserved,
                wallet.spendable()
            );
            Ok(EXIT_OK)
        }
        WalletCommand::Redeem {
            voucher,
            data_dir,
            suite,
        } => {
            let suite = make_suite(&suite.suite)?;
            let (mut wallet, mut store) = load_wallet(&data_dir.data_dir)?;
            let bytes = std::fs::read(&voucher).context("read voucher file")?;
            let voucher = ChargeVoucher::from_bytes(&bytes).map_err(|e| anyhow!("{e}"))?;
            wallet
                .redeem_charge(suite.as_ref(), &voucher)
                .map_err(|e| anyhow!("{e}"))?;
            store
                .save_wallet(&wallet.to_bytes())
                .map_err(|e| anyhow!("{e}"))?;
            println!(
                "redeemed serial {}: balance now {}",
                voucher.serial, wallet.balance
            );
            Ok(EXIT_OK)
        }
        WalletCommand::History { data_dir } => {
            let (wallet, _) = load_wallet(&data_dir.data_dir)?;
            for (txn, outcome) in &wallet.history {
                println!(
                    "{txn} {} {} with {}",
                    match outcome.outcome {
                        TxnOutcome::Committed => "committed",
                        TxnOutcome::Aborted => "aborted",
                    },
                    outcome.amount,
                    outcome.peer
                );
            }
            Ok(EXIT_OK)
        }
    }
}

// ── sell / buy ──

fn recover_node(
    dir: &PathBuf,
    protocol: ProtocolConfig,
    suite: Arc<dyn CryptoSuite + Send + Sync>,
) -> Result<(runtime::CliNode, p2pwallet_core::node::StepOutput)> {
    let store = FileStore::new(dir);
    let log = open_log(dir)?;
    let mut failpoint = EnvFailpoint::from_env();
    Node::recover(
        log,
        store,
        protocol,
        suite,
        entropy_rng(),
        SecretMode::Rng,
        &mut failpoint,
    )
    .map_err(|(e, _)| anyhow!("recover node state: {e}"))
}

fn sell(args: SellArgs) -> Result<u8> {
    let buyer = parse_node_id(&args.buyer)?;
    if args.amount == 0 {
        bail!("amount must be positive");
    }
    if args.peers.is_empty() && args.broadcast_port.is_none() {
        bail!("need at least one --peer or a --broadcast-port to reach buyers");
    }
    let suite = make_suite(&args.suite.suite)?;
    let (mut node, recovery_out) =
        recover_node(&args.data_dir.data_dir, args.protocol.config(), suite)?;
    node.set_mode(Mode::Seller).map_err(|e| anyhow!("{e}"))?;

    let mut rt = Runtime::new(
        node,
        args.port,
        args.peers.clone(),
        args.broadcast_port,
        args.protocol.timeout_ms,
    )?;
    rt.inject(recovery_out);

    let mut failpoint = EnvFailpoint::from_env();
    let sale_out = rt
        .node
        .start_sale(
            buyer,
            MoneyAmount::new(args.amount),
            args.desc.as_bytes(),
            &mut failpoint,
        )
        .unwrap_or_else(|crashed| {
            // A failpoint cannot trigger here (start_sale emits no effects),
            // but stay honest about the type.
            crashed.partial
        });
    rt.inject(sale_out);
    eprintln!(
        "selling {} to {} from port {}",
        args.amount,
        buyer,
        rt.local_port()
    );

    let deadline = Instant::now() + Duration::from_secs(args.max_seconds);
    loop {
        for event in rt.turn() {
            if let NodeEvent::SaleConcluded { txn, outcome } = event {
                let txn = txn.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
                return Ok(match outcome {
                    SaleOutcome::Committed => {
                        println!("committed {txn}: balance {}", rt.node.wallet.balance);
                        EXIT_OK
                    }
                    SaleOutcome::CommittedUnacked => {
                        println!(
                            "committed {txn} but unacknowledged; transfer completes on next contact"
                        );
                        EXIT_OK
                    }
                    SaleOutcome::Aborted => {
                        println!("aborted {txn}");
                        EXIT_ABORTED
                    }
                    SaleOutcome::BuyerNotFound => {
                        println!("buyer not found");
                        EXIT_ABORTED
                    }
                    SaleOutcome::Rejected(reason) => {
                        println!("rejected: {reason:?}");
                        EXIT_ABORTED
                    }
                    SaleOutcome::NoDecision => {
                        println!("no decision from buyer");
                        EXIT_ABORTED
                    }
                });
            }
        }
        if Instant::now() > deadline {
            println!("gave up after {}s", args.max_seconds);
            return Ok(EXIT_ABORTED);
        }
    }
}

fn buy(args: BuyArgs) -> Result<u8> {
    if !args.listen {
        bail!("buy requires --listen");
    }
    let suite = make_suite(&args.suite.suite)?;
    let (mut node, recovery_out) =
        recover_node(&args.data_dir.data_dir, args.protocol.config(), suite)?;
    node.set_mode(Mode::Buyer).map_err(|e| anyhow!("{e}"))?;

    let mut rt = Runtime::new(node, args.port, Vec::new(), None, args.protocol.timeout_ms)?;
    rt.inject(recovery_out);
    eprintln!(
        "listening as {} on port {}",
        rt.node.node_id(),
        rt.local_port()
    );

    let mut concluded: Option<u8> = None;
    let mut linger_until: Option<Instant> = None;
    loop {
        for event in rt.turn() {
            if let NodeEvent::PurchaseConcluded { txn, outcome } = event {
                let code = match outcome {
                    TxnOutcome::Committed => {
                        println!("purchase {txn} committed: balance {}", rt.node.wallet.balance);
                        EXIT_OK
                    }
                    TxnOutcome::Aborted => {
                        println!("purchase {txn} aborted");
                        EXIT_ABORTED
                    }
                };
                if !args.forever {
                    concluded = Some(code);
                    linger_until =
                        Some(Instant::now() + Duration::from_millis(args.linger_ms));
                }
            }
        }
        if let (Some(code), Some(until)) = (concluded, linger_until) {
            // Serve duplicate COMMITs briefly so a lost acknowledgement does
            // not park the seller.
            if Instant::now() > until {
                return Ok(code);
            }
        }
    }
}

// ── sim ──

fn sim(command: SimCommand) -> Result<u8> {
    match command {
        SimCommand::Run { config, trace } => {
            let text = std::fs::read_to_string(&config).context("read config file")?;
            let (sim_config, scenario) = parse_sim_file(&text).map_err(|e| anyhow!("{e}"))?;
            let result = run_scenario(&sim_config, &scenario).map_err(|e| anyhow!("{e}"))?;
            let body = result.trace.to_text(&result.verdict.line());
            std::fs::write(&trace, &body).context("write trace file")?;
            println!("{}", result.verdict.line());
            eprintln!("trace written to {}", trace.display());
            Ok(if result.verdict.clean() {
                EXIT_OK
            } else {
                EXIT_ABORTED
            })
        }
        SimCommand::Explore {
            bounds,
            policy,
            amount,
            balance,
            retries,
            commit_retries,
            max_states,
        } => {
            let parts: Vec<u32> = bounds
                .split(',')
                .map(|p| p.trim().parse::<u32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| anyhow!("bounds must be \"losses,dups,crashes\""))?;
            let [losses, dups, crashes] = parts.as_slice() else {
                bail!("bounds must be \"losses,dups,crashes\"");
            };
            let policies: Vec<TimeoutPolicy> = match policy.as_str() {
                "retry-then-abort" => vec![TimeoutPolicy::RetryThenAbort],
                "abort-immediately" => vec![TimeoutPolicy::AbortImmediately],
                "both" => vec![
                    TimeoutPolicy::RetryThenAbort,
                    TimeoutPolicy::AbortImmediately,
                ],
                other => bail!("unknown policy {other:?}"),
            };
            let mut all_clean = true;
            for policy in policies {
                let report = explore_exhaustive(&ExploreBounds {
                    max_losses: *losses,
                    max_dups: *dups,
                    max_crashes: *crashes,
                    protocol: ProtocolConfig {
                        max_prepare_retries: retries,
                        max_commit_retries: commit_retries,
                        timeout_units: 2,
                        timeout_policy: policy,
                    },
                    balance,
                    amount,
                    start_at_commit: false,
                    skip_prepare_logging: false,
                    max_states,
                })
                .map_err(|e| anyhow!("{e}"))?;
                let clean = report.all_terminals_atomic_and_conserved();
                all_clean &= clean;
                println!(
                    "policy {policy:?}: {} states, {} schedules, {} terminal classes",
                    report.states_visited,
                    report.schedules_total,
                    report.terminals.len()
                );
                println!(
                    "  all terminals atomic: {}",
                    if report.terminals.values().all(|t| t.atomic) {
                        "yes"
                    } else {
                        "no"
                    }
                );
                println!(
                    "  all terminals conserved: {}",
                    if report.terminals.values().all(|t| t.conserved) {
                        "yes"
                    } else {
                        "no"
                    }
                );
                for violation in report.violations.iter().take(5) {
                    println!("  violation: {}", violation.description);
                    println!("    schedule: {}", violation.schedule.join(" | "));
                }
            }
            Ok(if all_clean { EXIT_OK } else { EXIT_ABORTED })
        }
    }
}

// ── log ──

fn log_tool(command: LogCommand) -> Result<u8> {
    match command {
        LogCommand::Inspect { file } => {
            let bytes = std::fs::read(&file).context("read log file")?;
            let report = scan_bytes(&bytes).map_err(|e| anyhow!("{e}"))?;
            for (i, record) in report.records.iter().enumerate() {
                let detail = match &record.body {
                    RecordBody::Undo(s) => {
                        format!("balance={} reserved={}", s.balance, s.reserved)
                    }
                    RecordBody::Redo(s) => {
                        format!("balance={} reserved={}", s.balance, s.reserved)
                    }
                    RecordBody::Commit { peer, amount } => {
                        format!("peer={peer} amount={amount}")
                    }
                    RecordBody::Abort { peer: Some(peer) } => format!("peer={peer}"),
                    RecordBody::Abort { peer: None } => String::new(),
                    RecordBody::Complete | RecordBody::DoneErase => String::new(),
                };
                println!(
                    "#{:<3} {:<10} txn={} {}",
                    i,
                    record.body.kind_name(),
                    record.txn,
                    detail
                );
            }
            println!("--");
            for (txn, class) in recover_summary(&report.records) {
                println!("txn {txn}: {class:?}");
            }
            if report.torn_tail {
                println!(
                    "torn tail detected after byte {} ({} valid records)",
                    report.valid_len,
                    report.records.len()
                );
            }
            Ok(EXIT_OK)
        }
    }
}
