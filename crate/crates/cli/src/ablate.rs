use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use iclr_core::experiment::{ablation_variants, prepare_data, Axis, RunConfig};
use iclr_core::Strategy;

use crate::{load_config, seed_dir, train_seed, CliError, CliResult, CommonArgs};

/// One line of an ablation CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
    pub variant: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mean_knn_acc: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub axis: Axis,
    pub variants: Vec<VariantSummary>,
    /// Sampling axis only: whether semi-hard sampling has the highest mean.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub semi_hard_ranked_first: Option<bool>,
    pub csv: PathBuf,
    pub curves_csv: PathBuf,
}

/// Runs every variant of `axis` over the configured seeds. Each cell is a
/// full training run in `<out>/ablation_<axis>/<variant>/seed_<s>/`.
/// Writes `ablation_<axis>.csv` with final kNN accuracy per variant and
/// seed, `ablation_<axis>_curves.csv` with per-epoch metrics, the variant
/// configs and a summary.
pub fn cmd_ablate(axis: Axis, args: &CommonArgs) -> CliResult<AblationSummary> {
    let config = load_config(args)?;
    let seeds = match args.seed {
        Some(s) => vec![s],
        None => config.seeds.clone(),
    };
    let split = prepare_data(&config)?;
    let root = config.out_dir.join(format!("ablation_{axis}"));
    fs::create_dir_all(&root)?;

    let variants = ablation_variants(axis, &config.train);
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut configs = BTreeMap::new();
    let mut summaries = Vec::new();
    for (name, train) in &variants {
        let variant_config = RunConfig { train: train.clone(), ..config.clone() };
        configs.insert(name.clone(), variant_config.clone());
        let dir = root.join(dir_name(name));
        let mut total = 0.0;
        for &seed in &seeds {
            let trained = train_seed(&variant_config, &split, seed, &seed_dir(&dir, seed))?;
            let report = trained
                .report
                .ok_or_else(|| CliError::Config("ablations need a labelled dataset".into()))?;
            let last = trained.metrics.last().expect("at least one epoch").epoch;
            rows.push(AblationRow {
                epoch: last,
                metric: "knn_acc".into(),
                value: report.knn_acc,
                variant: name.clone(),
                seed,
            });
            total += report.knn_acc;
            for m in &trained.metrics {
                for (metric, value) in [
                    ("knn_acc", m.knn_acc),
                    ("nmi", m.nmi),
                    ("loss_total", m.loss_total),
                    ("label_churn", m.label_churn),
                ] {
                    curves.push(AblationRow {
                        epoch: m.epoch,
                        metric: metric.into(),
                        value,
                        variant: name.clone(),
                        seed,
                    });
                }
            }
        }
        summaries.push(VariantSummary {
            variant: name.clone(),
            mean_knn_acc: total / seeds.len() as f64,
            seeds: seeds.clone(),
        });
    }

    let csv = config.out_dir.join(format!("ablation_{axis}.csv"));
    let curves_csv = config.out_dir.join(format!("ablation_{axis}_curves.csv"));
    write_rows(&csv, &rows)?;
    write_rows(&curves_csv, &curves)?;
    fs::write(
        config.out_dir.join(format!("ablation_{axis}_configs.json")),
        serde_json::to_string_pretty(&configs)? + "\n",
    )?;

    let semi_hard_ranked_first = (axis == Axis::Sampling).then(|| {
        let semi = summaries
            .iter()
            .find(|s| s.variant == Strategy::SemiHard.name())
            .map_or(f64::NEG_INFINITY, |s| s.mean_knn_acc);
        summaries.iter().all(|s| s.mean_knn_acc <= semi)
    });
    let summary = AblationSummary { axis, variants: summaries, semi_hard_ranked_first, csv, curves_csv };
    fs::write(
        config.out_dir.join(format!("ablation_{axis}_summary.json")),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    for s in &summary.variants {
        println!("{axis} {:<14} mean knn_acc {:.4} over {} seed(s)", s.variant, s.mean_knn_acc, s.seeds.len());
    }
    if summary.semi_hard_ranked_first == Some(false) {
        println!("note: semi_hard is not ranked first on this run");
    }
    Ok(summary)
}

fn dir_name(variant: &str) -> String {
    variant.replace('=', "_")
}

fn write_rows(path: &std::path::Path, rows: &[AblationRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &std::path::Path) -> CliResult<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<AblationRow>, _>>()?)
}
