from depthlab.harness.data import Dataset, normalized_inputs, synth_dataset, teacher_output
from depthlab.harness.experiments import (
    CONVERGENCE_HEADER,
    ConvergenceReport,
    TransferResult,
    depth_convergence_experiment,
    gradient_check,
    index_spread,
    init_ntk_ensemble,
    linear_g0_profile,
    linear_onestep_experiment,
    lr_transfer_experiment,
    make_report,
    ntk_diag_variance,
    ntk_init_convergence,
    one_step_update_sizes,
    probe_inputs,
    write_convergence_csv,
)
from depthlab.harness.fit import SlopeFit, slope_fit
from depthlab.harness.parallel import default_workers, run_tasks
from depthlab.harness.training import SWEEP_HEADER, OptimizerSpec, SweepRecord, TrainResult, run_training, write_sweep_csv

__all__ = [
    "Dataset", "normalized_inputs", "synth_dataset", "teacher_output",
    "CONVERGENCE_HEADER", "SWEEP_HEADER", "make_report",
    "ConvergenceReport", "TransferResult", "depth_convergence_experiment", "gradient_check",
    "index_spread", "init_ntk_ensemble", "linear_g0_profile", "linear_onestep_experiment",
    "lr_transfer_experiment", "ntk_diag_variance", "ntk_init_convergence", "one_step_update_sizes",
    "probe_inputs", "write_convergence_csv",
    "SlopeFit", "slope_fit", "default_workers", "run_tasks",
    "OptimizerSpec", "SweepRecord", "TrainResult", "run_training", "write_sweep_csv",
]
