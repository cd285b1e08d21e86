//! Scenario script parsing and the simulation config file.
//!
//! The scenario script is a small line-oriented format:
//!
//! ```text
//! # comment
//! node S1 seller
//! node B1 buyer
//! charge B1 100
//! purchase S1 B1 40            # optional: at <time>, desc <word>
//! crash B1 at-effect 5
//! ```
//!
//! The config file handed to `sim run` is TOML with a `[sim]` table of
//! [`SimConfig`] fields and a `script` string holding the directives:
//!
//! ```toml
//! script = """
//! node S1 seller
//! node B1 buyer
//! charge B1 100
//! purchase S1 B1 40
//! """
//!
//! [sim]
//! seed = 7
//! loss_prob = 0.3
//! ```
//!
//! (`script` precedes the `[sim]` table: TOML top-level keys must come
//! before any table header.)

use serde::{Deserialize, Serialize};

use super::{NodeSpec, PurchaseSpec, Scenario, SimConfig, SimError};
use crate::wallet::Mode;

/// Top-level structure of a `sim run` config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimFile {
    #[serde(default)]
    pub sim: SimConfig,
    pub script: String,
}

/// Parses a TOML config file into config plus scenario.
pub fn parse_sim_file(text: &str) -> Result<(SimConfig, Scenario), SimError> {
    let file: SimFile =
        toml::from_str(text).map_err(|e| SimError::ConfigInvalid(format!("config: {e}")))?;
    let scenario = parse_scenario(&file.script)?;
    Ok((file.sim, scenario))
}

/// Parses scenario directives. Purchases without an explicit `at` are
/// staggered 100 units apart starting at time 1.
pub fn parse_scenario(text: &str) -> Result<Scenario, SimError> {
    let mut scenario = Scenario::default();
    let mut next_purchase_at: u64 = 1;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| {
            SimError::ConfigInvalid(format!("script line {}: {what}: {raw:?}", lineno + 1))
        };
        let words: Vec<&str> = line.split_whitespace().collect();
        match words[0] {
            "node" => {
                if words.len() != 3 {
                    return Err(bad("expected `node <name> <seller|buyer|idle>`"));
                }
                let mode = match words[2] {
                    "seller" => Mode::Seller,
                    "buyer" => Mode::Buyer,
                    "idle" => Mode::Idle,
                    _ => return Err(bad("mode must be seller, buyer, or idle")),
                };
                scenario.nodes.push(NodeSpec {
                    name: words[1].to_string(),
                    mode,
                });
            }
            "charge" => {
                if words.len() != 3 {
                    return Err(bad("expected `charge <name> <amount>`"));
                }
                let amount: u64 = words[2].parse().map_err(|_| bad("amount not a number"))?;
                scenario.charges.push((words[1].to_string(), amount));
            }
            "purchase" => {
                if words.len() < 4 {
                    return Err(bad(
                        "expected `purchase <seller> <buyer> <amount> [at <t>] [desc <word>]`",
                    ));
                }
                let amount: u64 = words[3].parse().map_err(|_| bad("amount not a number"))?;
                let mut at = next_purchase_at;
                let mut description = "goods".to_string();
                let mut rest = words[4..].iter();
                while let Some(key) = rest.next() {
                    match *key {
                        "at" => {
                            let v = rest.next().ok_or_else(|| bad("`at` needs a time"))?;
                            at = v.parse().map_err(|_| bad("time not a number"))?;
                        }
                        "desc" => {
                            let v = rest.next().ok_or_else(|| bad("`desc` needs a word"))?;
                            description = v.to_string();
                        }
                        _ => return Err(bad("unknown purchase option")),
                    }
                }
                next_purchase_at = at + 100;
                scenario.purchases.push(PurchaseSpec {
                    seller: words[1].to_string(),
                    buyer: words[2].to_string(),
                    amount,
                    at,
                    description,
                });
            }
            "crash" => {
                if words.len() != 4 || words[2] != "at-effect" {
                    return Err(bad("expected `crash <name> at-effect <n>`"));
                }
                let effect: u64 = words[3].parse().map_err(|_| bad("effect not a number"))?;
                scenario
                    .crash_plan
                    .entry(words[1].to_string())
                    .or_default()
                    .push(effect);
            }
            _ => return Err(bad("unknown directive")),
        }
    }
    scenario.validate()?;
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCRIPT: &str = "
# a tiny scenario
node S1 seller
node B1 buyer
node I1 idle
charge B1 100
purchase S1 B1 40 desc tools
crash B1 at-effect 5
";

    #[test]
    fn parses_directives() {
        let scenario = parse_scenario(SCRIPT).unwrap();
        assert_eq!(scenario.nodes.len(), 3);
        assert_eq!(scenario.nodes[1].mode, Mode::Buyer);
        assert_eq!(scenario.charges, vec![("B1".to_string(), 100)]);
        assert_eq!(scenario.purchases.len(), 1);
        assert_eq!(scenario.purchases[0].amount, 40);
        assert_eq!(scenario.purchases[0].at, 1);
        assert_eq!(scenario.purchases[0].description, "tools");
        assert_eq!(scenario.crash_plan["B1"], vec![5]);
    }

    #[test]
    fn purchases_stagger_unless_timed() {
        let scenario = parse_scenario(
            "node S1 seller
node B1 buyer
charge B1 500
purchase S1 B1 10
purchase S1 B1 20
purchase S1 B1 30 at 7
purchase S1 B1 40",
        )
        .unwrap();
        let times: Vec<u64> = scenario.purchases.iter().map(|p| p.at).collect();
        assert_eq!(times, vec![1, 101, 7, 107]);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_scenario("node S1").is_err());
        assert!(parse_scenario("node S1 wizard\nnode B1 buyer").is_err());
        assert!(parse_scenario("blargh").is_err());
        assert!(parse_scenario("node S1 seller\nnode B1 buyer\ncharge B1 lots").is_err());
        // Semantic validation: unknown node in a purchase.
        assert!(parse_scenario("node S1 seller\nnode B1 buyer\npurchase S1 B9 5").is_err());
    }

    #[test]
    fn sim_file_roundtrip() {
        let text = r#"
script = """
node S1 seller
node B1 buyer
charge B1 100
purchase S1 B1 40
"""

[sim]
seed = 7
loss_prob = 0.25
max_time = 500
"#;
        let (config, scenario) = parse_sim_file(text).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.loss_prob, 0.25);
        assert_eq!(config.max_time, 500);
        assert_eq!(scenario.purchases.len(), 1);

        // Unknown config keys are rejected rather than silently ignored.
        let bad = r#"
script = "node A seller\nnode B buyer"

[sim]
sneed = 7
"#;
        assert!(parse_sim_file(bad).is_err());
    }
}
