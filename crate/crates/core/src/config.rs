//! Run configuration: an INI-style `key = value` file with sections
//! `[parallelism]`, `[cost]`, `[moe]`, `[inject]` and `[run]`.

use std::collections::BTreeMap;

use crate::coordinator::{InjectionKind, InjectionRule, RuleMatcher};
use crate::graph::{CommKind, GroupId, RankId};
use crate::moe::BalanceRatioProfile;
use crate::workload::{self, CostModel, ParallelismSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("[parallelism]: either preset+world or explicit tp/pp/dp required")]
    MissingParallelism,
    #[error(transparent)]
    Workload(#[from] workload::WorkloadError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeSection {
    pub profile: BalanceRatioProfile,
    pub events: usize,
    pub normalize_per_event: bool,
    pub tokens_per_event: u64,
}

impl Default for MoeSection {
    fn default() -> MoeSection {
        MoeSection {
            profile: BalanceRatioProfile::balanced(),
            events: 64,
            normalize_per_event: false,
            tokens_per_event: 8192,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub slice_size: u32,
    pub jitter: f64,
    pub n_slots: usize,
    pub sandbox: Option<(u32, u32)>, // inclusive rank range a-b
    pub gpu_pool_bytes: u64,
    pub cpu_pool_bytes: u64,
    pub store_capacity_bytes: u64,
    pub allow_spill: bool,
}

impl Default for RunSection {
    fn default() -> RunSection {
        RunSection {
            seed: 0,
            slice_size: 8,
            jitter: 0.0,
            n_slots: 8,
            sandbox: None,
            gpu_pool_bytes: 96 << 30,
            cpu_pool_bytes: 512 << 30,
            store_capacity_bytes: u64::MAX,
            allow_spill: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub spec: ParallelismSpec,
    pub cost: CostModel,
    pub moe: Option<MoeSection>,
    pub inject: Vec<InjectionRule>,
    pub run: RunSection,
}

impl RunConfig {
    pub fn sandbox_set(&self) -> std::collections::BTreeSet<RankId> {
        match self.run.sandbox {
            Some((a, b)) => (a..=b).map(RankId).collect(),
            None => (0..self.spec.world()).map(RankId).collect(),
        }
    }
}

fn parse_sections(text: &str) -> Result<BTreeMap<String, Vec<(usize, String, String)>>, ConfigError> {
    let mut sections: BTreeMap<String, Vec<(usize, String, String)>> = BTreeMap::new();
    let mut current = String::from("");
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or(ConfigError::Malformed {
                line: lineno,
                reason: "unterminated section header".to_string(),
            })?;
            current = name.trim().to_string();
            sections.entry(current.clone()).or_default();
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Malformed {
            line: lineno,
            reason: "expected key = value".to_string(),
        })?;
        sections.entry(current.clone()).or_default().push((
            lineno,
            key.trim().to_string(),
            value.trim().to_string(),
        ));
    }
    Ok(sections)
}

fn bad(line: usize, reason: impl Into<String>) -> ConfigError {
    ConfigError::Malformed {
        line,
        reason: reason.into(),
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| bad(line, format!("bad value for {key}: {v:?}")))
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(line, format!("bad boolean for {key}: {v:?}"))),
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let sections = parse_sections(text)?;

    // [parallelism]
    let mut preset_name: Option<String> = None;
    let mut world: Option<u32> = None;
    let mut fields: BTreeMap<&str, u32> = BTreeMap::new();
    if let Some(entries) = sections.get("parallelism") {
        for (line, key, value) in entries {
            match key.as_str() {
                "preset" => preset_name = Some(value.clone()),
                "world" => world = Some(parse_num(*line, key, value)?),
                "tp" | "pp" | "vpp" | "ep" | "dp" | "ga" => {
                    let k: &str = match key.as_str() {
                        "tp" => "tp",
                        "pp" => "pp",
                        "vpp" => "vpp",
                        "ep" => "ep",
                        "dp" => "dp",
                        _ => "ga",
                    };
                    fields.insert(k, parse_num(*line, key, value)?);
                }
                _ => return Err(bad(*line, format!("unknown parallelism key {key:?}"))),
            }
        }
    }

    let (mut spec, mut cost) = match (preset_name, world) {
        (Some(name), Some(world)) => workload::preset(&name, world)?,
        (Some(_), None) => return Err(ConfigError::MissingParallelism),
        (None, _) => {
            let get = |k: &str, default: u32| fields.get(k).copied().unwrap_or(default);
            if fields.is_empty() {
                return Err(ConfigError::MissingParallelism);
            }
            let spec = ParallelismSpec {
                tp: get("tp", 1),
                pp: get("pp", 1),
                vpp: get("vpp", 0),
                ep: get("ep", 1),
                dp: get("dp", 1),
                ga: get("ga", 1),
            };
            spec.validate()?;
            (spec, CostModel::default())
        }
    };
    // Explicit fields override preset values.
    if let Some(&ga) = fields.get("ga") {
        spec.ga = ga;
    }
    if let Some(&vpp) = fields.get("vpp") {
        spec.vpp = vpp;
    }
    spec.validate()?;

    // [cost]
    if let Some(entries) = sections.get("cost") {
        for (line, key, value) in entries {
            match key.as_str() {
                "fwd_ns" => cost.fwd_ns = parse_num(*line, key, value)?,
                "bwd_ns" => cost.bwd_ns = parse_num(*line, key, value)?,
                "pp_p2p_ns" => cost.pp_p2p_ns = parse_num(*line, key, value)?,
                "coll_base_ns" => cost.coll_base_ns = parse_num(*line, key, value)?,
                "coll_bytes_per_sec" => cost.coll_bytes_per_sec = parse_num(*line, key, value)?,
                "pp_payload_bytes" => cost.pp_payload_bytes = parse_num(*line, key, value)?,
                "dp_payload_bytes" => cost.dp_payload_bytes = parse_num(*line, key, value)?,
                "ep_payload_bytes" => cost.ep_payload_bytes = parse_num(*line, key, value)?,
                "activation_bytes" => cost.activation_bytes = parse_num(*line, key, value)?,
                "swap_out_ns" => cost.swap_out_ns = parse_num(*line, key, value)?,
                "swap_in_ns" => cost.swap_in_ns = parse_num(*line, key, value)?,
                "elems_per_member" => cost.elems_per_member = parse_num(*line, key, value)?,
                _ => return Err(bad(*line, format!("unknown cost key {key:?}"))),
            }
        }
    }

    // [moe]
    let mut moe: Option<MoeSection> = None;
    if let Some(entries) = sections.get("moe") {
        let mut section = MoeSection::default();
        for (line, key, value) in entries {
            match key.as_str() {
                "br_min" => section.profile.br_min = parse_num(*line, key, value)?,
                "br_max" => section.profile.br_max = parse_num(*line, key, value)?,
                "br_avg" => section.profile.br_avg = parse_num(*line, key, value)?,
                "br_std" => section.profile.br_std = parse_num(*line, key, value)?,
                "br_med" => section.profile.br_med = parse_num(*line, key, value)?,
                "br_skew" => section.profile.br_skew = parse_num(*line, key, value)?,
                "events" => section.events = parse_num(*line, key, value)?,
                "normalize_per_event" => {
                    section.normalize_per_event = parse_bool(*line, key, value)?
                }
                "tokens_per_event" => section.tokens_per_event = parse_num(*line, key, value)?,
                "layers_per_stage" => {
                    cost.moe_layers_per_stage = parse_num(*line, key, value)?
                }
                _ => return Err(bad(*line, format!("unknown moe key {key:?}"))),
            }
        }
        moe = Some(section);
    }

    // [inject]: `rule = <kind> <comm-kind|*> [group=<id>]`
    let mut inject = Vec::new();
    if let Some(entries) = sections.get("inject") {
        for (line, key, value) in entries {
            if key != "rule" {
                return Err(bad(*line, format!("unknown inject key {key:?}")));
            }
            inject.push(parse_rule(*line, value)?);
        }
    }

    // [run]
    let mut run = RunSection::default();
    if let Some(entries) = sections.get("run") {
        for (line, key, value) in entries {
            match key.as_str() {
                "seed" => run.seed = parse_num(*line, key, value)?,
                "slice_size" => run.slice_size = parse_num(*line, key, value)?,
                "jitter" => run.jitter = parse_num(*line, key, value)?,
                "n_slots" => run.n_slots = parse_num(*line, key, value)?,
                "sandbox" => run.sandbox = Some(parse_range(*line, value)?),
                "gpu_pool_bytes" => run.gpu_pool_bytes = parse_num(*line, key, value)?,
                "cpu_pool_bytes" => run.cpu_pool_bytes = parse_num(*line, key, value)?,
                "store_capacity_bytes" => {
                    run.store_capacity_bytes = parse_num(*line, key, value)?
                }
                "allow_spill" => run.allow_spill = parse_bool(*line, key, value)?,
                _ => return Err(bad(*line, format!("unknown run key {key:?}"))),
            }
        }
    }

    Ok(RunConfig {
        spec,
        cost,
        moe,
        inject,
        run,
    })
}

/// Parses `a-b` (inclusive) or a single rank `a`.
pub fn parse_range(line: usize, v: &str) -> Result<(u32, u32), ConfigError> {
    if let Some((a, b)) = v.split_once('-') {
        let a = parse_num(line, "sandbox", a.trim())?;
        let b = parse_num(line, "sandbox", b.trim())?;
        if a > b {
            return Err(bad(line, format!("empty range {v:?}")));
        }
        Ok((a, b))
    } else {
        let a = parse_num(line, "sandbox", v)?;
        Ok((a, a))
    }
}

fn parse_rule(line: usize, value: &str) -> Result<InjectionRule, ConfigError> {
    let mut toks = value.split_whitespace();
    let kind_tok = toks
        .next()
        .ok_or_else(|| bad(line, "empty injection rule"))?;
    let kind = if kind_tok == "constant_status" {
        InjectionKind::ConstantStatus
    } else if kind_tok == "zero_splits" {
        InjectionKind::ZeroSplits
    } else if let Some(v) = kind_tok.strip_prefix("in_range_index:") {
        InjectionKind::InRangeIndex {
            vocab: parse_num(line, "in_range_index", v)?,
        }
    } else {
        return Err(bad(line, format!("unknown injection kind {kind_tok:?}")));
    };
    let mut matcher = RuleMatcher::default();
    for t in toks {
        if t == "*" {
            continue;
        } else if let Some(g) = t.strip_prefix("group=") {
            matcher.group = Some(GroupId(parse_num(line, "group", g)?));
        } else if let Some(k) = CommKind::parse(t) {
            matcher.kind = Some(k);
        } else {
            return Err(bad(line, format!("unknown rule token {t:?}")));
        }
    }
    Ok(InjectionRule { kind, matcher })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_preset_config() {
        let text = "\
[parallelism]
preset = S.A
world = 16

[run]
seed = 7
slice_size = 4
sandbox = 0-3
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.spec.pp, 4);
        assert_eq!(cfg.spec.dp, 4);
        assert_eq!(cfg.run.seed, 7);
        assert_eq!(cfg.run.sandbox, Some((0, 3)));
        assert_eq!(cfg.sandbox_set().len(), 4);
    }

    #[test]
    fn parses_explicit_spec_and_rules() {
        let text = "\
# explicit degrees
[parallelism]
tp = 2
pp = 2
dp = 2
ep = 2
ga = 4

[cost]
fwd_ns = 5000000

[moe]
br_min = 0.71
br_max = 2.16
br_avg = 1.48
br_std = 0.37
br_med = 1.38
br_skew = 0.90
events = 32

[inject]
rule = constant_status broadcast
rule = zero_splits alltoall
rule = in_range_index:1000 broadcast group=3
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.spec.world(), 8);
        assert_eq!(cfg.cost.fwd_ns, 5_000_000);
        let moe = cfg.moe.unwrap();
        assert_eq!(moe.profile.br_max, 2.16);
        assert_eq!(cfg.inject.len(), 3);
        assert_eq!(cfg.inject[1].kind, InjectionKind::ZeroSplits);
        assert_eq!(cfg.inject[2].matcher.group, Some(GroupId(3)));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        assert!(parse_config("[parallelism]\nbogus = 1\n").is_err());
        assert!(parse_config("[run]\nseed\n").is_err());
        assert!(parse_config("").is_err());
    }
}
