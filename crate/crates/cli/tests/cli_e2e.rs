//! End-to-end tests of the `p2pwallet` binary: office tooling, the real
//! sell/buy exchange over loopback UDP, the scripted kill-and-restart crash
//! test driven by the effect-boundary failpoint, simulator determinism, and
//! log inspection.

use std::net::UdpSocket;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_p2pwallet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("spawn p2pwallet")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn p2pwallet")
}

fn stdout_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

fn free_port() -> u16 {
    UdpSocket::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

struct TestNet {
    root: TempDir,
}

impl TestNet {
    fn new() -> Self {
        TestNet {
            root: TempDir::new().unwrap(),
        }
    }

    fn office_dir(&self) -> PathBuf {
        self.root.path().join("office")
    }

    fn data_dir(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn provision(&self, name: &str, suite: &str) {
        let output = run(&[
            "office",
            "provision",
            name,
            "--office-dir",
            self.office_dir().to_str().unwrap(),
            "--data-dir",
            self.data_dir(name).to_str().unwrap(),
            "--suite",
            suite,
        ]);
        assert!(
            output.status.success(),
            "provision {name}: {}",
            stderr_of(&output)
        );
    }

    fn charge(&self, name: &str, amount: u64, suite: &str) -> PathBuf {
        let voucher = self.root.path().join(format!("{name}-{amount}.pvch"));
        let output = run(&[
            "office",
            "charge",
            name,
            &amount.to_string(),
            "--office-dir",
            self.office_dir().to_str().unwrap(),
            "--out",
            voucher.to_str().unwrap(),
            "--suite",
            suite,
        ]);
        assert!(
            output.status.success(),
            "charge {name}: {}",
            stderr_of(&output)
        );
        let output = run(&[
            "wallet",
            "redeem",
            voucher.to_str().unwrap(),
            "--data-dir",
            self.data_dir(name).to_str().unwrap(),
            "--suite",
            suite,
        ]);
        assert!(
            output.status.success(),
            "redeem {name}: {}",
            stderr_of(&output)
        );
        voucher
    }

    fn balance(&self, name: &str) -> u64 {
        let output = run(&[
            "wallet",
            "balance",
            "--data-dir",
            self.data_dir(name).to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{}", stderr_of(&output));
        stdout_of(&output).trim().parse().expect("balance number")
    }

    fn spawn_buy(&self, name: &str, port: u16, suite: &str, extra_env: &[(&str, &str)]) -> Child {
        let mut cmd = Command::new(bin());
        cmd.args([
            "buy",
            "--listen",
            "--port",
            &port.to_string(),
            "--data-dir",
            self.data_dir(name).to_str().unwrap(),
            "--suite",
            suite,
            "--timeout-ms",
            "300",
            "--linger-ms",
            "700",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
        for (k, v) in extra_env {
            cmd.env(k, v);
        }
        cmd.spawn().expect("spawn buy")
    }

    fn sell(&self, name: &str, buyer: &str, amount: u64, port: u16, suite: &str) -> Output {
        run(&[
            "sell",
            "--amount",
            &amount.to_string(),
            "--buyer",
            buyer,
            "--peer",
            &format!("127.0.0.1:{port}"),
            "--data-dir",
            self.data_dir(name).to_str().unwrap(),
            "--suite",
            suite,
            "--timeout-ms",
            "300",
            "--max-seconds",
            "30",
        ])
    }
}

#[test]
fn office_charge_redeem_and_replay_protection() {
    let net = TestNet::new();
    net.provision("N1", "toy");
    let voucher = net.charge("N1", 100, "toy");
    assert_eq!(net.balance("N1"), 100);

    // Replaying the same voucher file is refused and changes nothing.
    let replay = run(&[
        "wallet",
        "redeem",
        voucher.to_str().unwrap(),
        "--data-dir",
        net.data_dir("N1").to_str().unwrap(),
        "--suite",
        "toy",
    ]);
    assert_eq!(replay.status.code(), Some(3), "{}", stderr_of(&replay));
    assert!(
        stderr_of(&replay).contains("already redeemed"),
        "{}",
        stderr_of(&replay)
    );
    assert_eq!(net.balance("N1"), 100);

    // Charging an unprovisioned node fails loudly.
    let unknown = run(&[
        "office",
        "charge",
        "N9",
        "50",
        "--office-dir",
        net.office_dir().to_str().unwrap(),
        "--suite",
        "toy",
    ]);
    assert!(!unknown.status.success());
    assert!(
        stderr_of(&unknown).contains("not provisioned"),
        "{}",
        stderr_of(&unknown)
    );

    // Provisioning the same id twice is refused by the office.
    let dup = run(&[
        "office",
        "provision",
        "N1",
        "--office-dir",
        net.office_dir().to_str().unwrap(),
        "--data-dir",
        net.data_dir("N1-again").to_str().unwrap(),
        "--suite",
        "toy",
    ]);
    assert!(!dup.status.success());
}

#[test]
fn sell_buy_happy_path_over_loopback() {
    let net = TestNet::new();
    net.provision("S1", "reference");
    net.provision("B1", "reference");
    net.charge("B1", 100, "reference");

    let port = free_port();
    let buyer = net.spawn_buy("B1", port, "reference", &[]);
    std::thread::sleep(Duration::from_millis(300));

    let sale = net.sell("S1", "B1", 40, port, "reference");
    assert_eq!(
        sale.status.code(),
        Some(0),
        "sell: out={} err={}",
        stdout_of(&sale),
        stderr_of(&sale)
    );

    let buyer_out = buyer.wait_with_output().expect("buy exits");
    assert_eq!(
        buyer_out.status.code(),
        Some(0),
        "buy: out={} err={}",
        stdout_of(&buyer_out),
        stderr_of(&buyer_out)
    );

    assert_eq!(net.balance("S1"), 40);
    assert_eq!(net.balance("B1"), 60);

    // Both durable logs closed the transaction out.
    for name in ["S1", "B1"] {
        let log = net.data_dir(name).join("node.plog");
        let inspect = run(&["log", "inspect", log.to_str().unwrap()]);
        let text = stdout_of(&inspect);
        assert!(text.contains("COMPLETE"), "{name}: {text}");
        assert!(text.contains("DONE-ERASE"), "{name}: {text}");
        assert!(text.contains("Erased"), "{name}: {text}");
    }
}

#[test]
fn sell_beyond_balance_is_rejected() {
    let net = TestNet::new();
    net.provision("S1", "toy");
    net.provision("B1", "toy");
    net.charge("B1", 100, "toy");

    let port = free_port();
    let mut buyer = net.spawn_buy("B1", port, "toy", &[]);
    std::thread::sleep(Duration::from_millis(300));

    let sale = net.sell("S1", "B1", 140, port, "toy");
    assert_eq!(
        sale.status.code(),
        Some(2),
        "sell should exit aborted: out={} err={}",
        stdout_of(&sale),
        stderr_of(&sale)
    );
    assert!(stdout_of(&sale).contains("rejected"), "{}", stdout_of(&sale));

    // A rejection is not a concluded purchase, so the buyer keeps
    // listening; stop it.
    buyer.kill().ok();
    buyer.wait().ok();

    assert_eq!(net.balance("S1"), 0);
    assert_eq!(net.balance("B1"), 100);
}

/// The scripted integration crash test: kill the buyer between its AGREED
/// and the seller's COMMIT (failpoint after effect 3 = the AGREED send),
/// restart it, and watch the transaction complete.
#[test]
fn kill_and_restart_buyer_mid_commit_completes() {
    let net = TestNet::new();
    net.provision("S1", "toy");
    net.provision("B1", "toy");
    net.charge("B1", 100, "toy");

    let port = free_port();
    let doomed = net.spawn_buy("B1", port, "toy", &[("P2PWALLET_CRASH_AFTER_EFFECT", "3")]);
    std::thread::sleep(Duration::from_millis(300));

    // Seller runs concurrently; its COMMITs retransmit while the buyer is
    // down.
    let seller = {
        let net_dir = net.data_dir("S1");
        let mut cmd = Command::new(bin());
        cmd.args([
            "sell",
            "--amount",
            "40",
            "--buyer",
            "B1",
            "--peer",
            &format!("127.0.0.1:{port}"),
            "--data-dir",
            net_dir.to_str().unwrap(),
            "--suite",
            "toy",
            "--timeout-ms",
            "300",
            "--max-seconds",
            "30",
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
        cmd.spawn().expect("spawn sell")
    };

    let doomed_out = doomed.wait_with_output().expect("doomed buyer exits");
    assert!(
        !doomed_out.status.success(),
        "the failpoint must kill the first buyer: {}",
        stdout_of(&doomed_out)
    );

    std::thread::sleep(Duration::from_millis(300));
    let revived = net.spawn_buy("B1", port, "toy", &[]);

    let seller_out = seller.wait_with_output().expect("sell exits");
    assert_eq!(
        seller_out.status.code(),
        Some(0),
        "sell after buyer restart: out={} err={}",
        stdout_of(&seller_out),
        stderr_of(&seller_out)
    );
    let revived_out = revived.wait_with_output().expect("revived buyer exits");
    assert_eq!(
        revived_out.status.code(),
        Some(0),
        "revived buy: out={} err={}",
        stdout_of(&revived_out),
        stderr_of(&revived_out)
    );

    assert_eq!(net.balance("S1"), 40);
    assert_eq!(net.balance("B1"), 60);
}

#[test]
fn sim_run_is_deterministic_and_explore_reports_atomic() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("sim.toml");
    std::fs::write(
        &config,
        r#"
script = """
node S1 seller
node B1 buyer
charge B1 100
purchase S1 B1 40
crash B1 at-effect 2
"""

[sim]
seed = 42
loss_prob = 0.2
dup_prob = 0.05
delay_max = 3
max_time = 2000
fairness_loss_cap = 20
"#,
    )
    .unwrap();

    let first = run_in(
        dir.path(),
        &[
            "sim",
            "run",
            "--config",
            config.to_str().unwrap(),
            "--trace",
            "a.trace",
        ],
    );
    assert_eq!(first.status.code(), Some(0), "{}", stderr_of(&first));
    let second = run_in(
        dir.path(),
        &[
            "sim",
            "run",
            "--config",
            config.to_str().unwrap(),
            "--trace",
            "b.trace",
        ],
    );
    assert_eq!(second.status.code(), Some(0), "{}", stderr_of(&second));
    let a = std::fs::read(dir.path().join("a.trace")).unwrap();
    let b = std::fs::read(dir.path().join("b.trace")).unwrap();
    assert_eq!(a, b, "same config must give byte-identical traces");

    let explore = run(&["sim", "explore", "--bounds", "2,1,1", "--policy", "both"]);
    assert_eq!(explore.status.code(), Some(0), "{}", stderr_of(&explore));
    let text = stdout_of(&explore);
    assert!(
        text.matches("all terminals atomic: yes").count() == 2,
        "{text}"
    );
}

#[test]
fn log_inspect_reports_torn_tail() {
    use p2pwallet_core::ids::{NodeId, TransactionId};
    use p2pwallet_core::money::MoneyAmount;
    use p2pwallet_core::stable_log::{
        encode_record, BalanceSnapshot, LogRecord, RecordBody, LOG_MAGIC, LOG_VERSION,
    };
    use rand::SeedableRng;

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("torn.plog");
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
    let txn = TransactionId::generate(&NodeId::from_name("S1").unwrap(), &mut rng);

    let mut bytes = Vec::new();
    bytes.extend_from_slice(&LOG_MAGIC);
    bytes.extend_from_slice(&LOG_VERSION.to_le_bytes());
    bytes.extend_from_slice(&encode_record(&LogRecord::new(
        txn,
        RecordBody::Undo(BalanceSnapshot {
            balance: MoneyAmount::new(100),
            reserved: MoneyAmount::new(0),
        }),
    )));
    let redo = encode_record(&LogRecord::new(
        txn,
        RecordBody::Redo(BalanceSnapshot {
            balance: MoneyAmount::new(60),
            reserved: MoneyAmount::new(0),
        }),
    ));
    bytes.extend_from_slice(&redo[..redo.len() / 2]); // torn mid-append
    std::fs::write(&path, &bytes).unwrap();

    let output = run(&["log", "inspect", path.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    let text = stdout_of(&output);
    assert!(text.contains("UNDO"), "{text}");
    assert!(text.contains("torn tail detected"), "{text}");
    assert!(text.contains("IncompletePrepare"), "{text}");
}
