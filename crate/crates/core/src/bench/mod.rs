//! Synthetic few-shot benchmark, ablation suites, oracle checks and
//! artifact export.

mod ablate;
mod data;
mod experiment;
mod export;
mod oracle_check;
mod select;

pub use ablate::{
    ablate, diversity_header, suite_cells, write_ablation_csv, write_diversity_csv, write_runs_csv,
    AblationRow, Cell, Suite, ABLATION_CSV_HEADER, ALPHA_GRID, GROUP_COUNTS, RUNS_CSV_HEADER,
    SIGMA_GRID,
};
pub use data::{
    generate, generate_synthetic, Alignment, ClassGlyph, DataSpec, SyntheticDataset,
    ALIGN_CANDIDATES, VAL_FRACTION,
};
pub use experiment::{
    kernel_mask_means, mean_std, run_experiment, run_experiment_on, run_once, run_seed, shot_sweep,
    ExperimentConfig, ExperimentResult, RunRecord, DEFAULT_RUNS, EXPERIMENT_KEYS, MASK_STAT_IMAGES,
    SHOT_PROTOCOL,
};
pub use export::{export_artifacts, write_pgm, EXPORT_IMAGES};
pub use oracle_check::{
    check_diagonal, check_discrete, check_full_cov, oracle_check, write_oracle_csv, OracleCheck,
    OracleReport, ORACLE_CSV_HEADER,
};
pub use select::{select_plan_on_val, write_plan_csv, PlanScore, PLAN_CSV_HEADER};
