//! Input-channel and unroll-length ablations under a shared training budget.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kinematics::SkeletonModel;
use crate::scalar::Real;
use crate::trainer::{self, evaluate_learned, Instance, PoseSource, Silent, TrainConfig};
use crate::updatenet::{InputMode, UpdateNetwork};

/// Largest unroll length in the unroll sweep.
pub const MAX_ABLATION_UNROLL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    /// The five input-channel variants at the configured unroll length.
    Components,
    /// Full input at unroll lengths 1 through 5.
    Unroll,
    All,
    Single(InputMode),
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Self::Components),
            "unroll" => Ok(Self::Unroll),
            "all" => Ok(Self::All),
            other => other.parse().map(Self::Single).map_err(|_| {
                Error::Config(format!("unknown ablation '{other}' (expected components, unroll, all or an input mode)"))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub table: &'static str,
    pub variant: String,
    pub unroll: usize,
    pub input_mode: InputMode,
    /// Mean held-out errors at the variant's own unroll length, mm-equivalent.
    pub heldout_pa_mpjpe: f64,
    pub heldout_mpjpe: f64,
}

fn variants(kind: AblationKind, unroll: usize) -> Vec<(&'static str, InputMode, usize)> {
    let components = || InputMode::ALL.iter().map(|m| ("components", *m, unroll)).collect::<Vec<_>>();
    let unrolls = || (1..=MAX_ABLATION_UNROLL).map(|n| ("unroll", InputMode::Full, n)).collect::<Vec<_>>();
    match kind {
        AblationKind::Components => components(),
        AblationKind::Unroll => unrolls(),
        AblationKind::All => components().into_iter().chain(unrolls()).collect(),
        AblationKind::Single(m) => vec![("single", m, unroll)],
    }
}

/// Trains every variant of `kind` with `config` (only the input mode or the
/// unroll length changes) in precision `T`, then evaluates in f64 on
/// `heldout`. Identical variants are trained once.
pub fn run_ablation<T: Real>(
    kind: AblationKind,
    config: &TrainConfig,
    model: &SkeletonModel<f64>,
    source: &PoseSource,
    heldout: &[Instance<f64>],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let model_t = model.cast::<T>();
    let mut done: BTreeMap<(&str, usize), (f64, f64)> = BTreeMap::new();
    let mut rows = Vec::new();
    for (table, mode, unroll) in variants(kind, config.unroll) {
        let key = (mode.name(), unroll);
        let (pa, mp) = match done.get(&key) {
            Some(v) => *v,
            None => {
                let cfg = TrainConfig { input_mode: mode, unroll, ..config.clone() };
                let mut net = UpdateNetwork::<T>::new(cfg.architecture(), cfg.seed).with_input_mode(mode);
                trainer::train(&mut net, &cfg, &model_t, source, &mut Silent)?;
                let report = evaluate_learned(&net.cast::<f64>(), heldout, model, unroll)?;
                let v = (report.mean_pa_mpjpe, report.mean_mpjpe);
                done.insert(key, v);
                v
            }
        };
        let variant = match table {
            "unroll" => format!("N={unroll}"),
            _ => mode.name().to_string(),
        };
        let row = AblationRow { table, variant, unroll, input_mode: mode, heldout_pa_mpjpe: pa, heldout_mpjpe: mp };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{heldout_set, PoseSampler};

    #[test]
    fn variant_lists() {
        let c = variants(AblationKind::Components, 4);
        assert_eq!(c.len(), 5);
        assert!(c.iter().all(|v| v.2 == 4));
        let u = variants(AblationKind::Unroll, 4);
        assert_eq!(u.iter().map(|v| v.2).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
        assert_eq!(variants(AblationKind::All, 4).len(), 10);
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("unroll".parse::<AblationKind>().unwrap(), AblationKind::Unroll);
        assert_eq!("no-grad".parse::<AblationKind>().unwrap(), AblationKind::Single(InputMode::NoGrad));
        assert!(matches!("sideways".parse::<AblationKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_ablation_runs_and_reuses_the_shared_variant() {
        let model = SkeletonModel::human(0);
        let cfg = TrainConfig { steps: 2, batch_size: 2, eval_every: 0, hidden: 16, blocks: 1, ..TrainConfig::default() };
        let source = PoseSource::Sampler(PoseSampler::new(24, &cfg.sampler, 0));
        let held = heldout_set(&source, &cfg, &model, 3, 1, 0.0).unwrap();
        let rows = run_ablation::<f64>(AblationKind::All, &cfg, &model, &source, &held, |_| {}).unwrap();
        assert_eq!(rows.len(), 10);
        let full_c = rows.iter().find(|r| r.table == "components" && r.input_mode == InputMode::Full).unwrap();
        let full_u = rows.iter().find(|r| r.table == "unroll" && r.unroll == 4).unwrap();
        assert_eq!(full_c.heldout_pa_mpjpe, full_u.heldout_pa_mpjpe);
        assert!(rows.iter().all(|r| r.heldout_pa_mpjpe.is_finite() && r.heldout_pa_mpjpe >= 0.0));
    }
}
