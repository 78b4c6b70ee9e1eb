"""Conservative safety critics for safe exploration in tabular constrained MDPs."""

from ._validation import PoisonedStateError
from .cmdp import (
    ExactValues,
    PolicyTable,
    TabularCMDP,
    discounted_state_distribution,
    exact_policy_values,
    expected_failure_probability,
    kl_divergence,
    total_variation,
)
from .critic import EnsembleCritic, SafetyCritic, TransitionBatch, conservative_gap, cql_step, ensemble_gate_value
from .envs import (
    TrapGridSpec,
    build_continuous_signal_grid,
    build_trap_grid,
    default_trap_grid_spec,
    generate_seed_dataset,
    random_cmdp,
)
from .explorer import GateConfig, ReplayBuffer, average_failures, epsilon_schedule, gated_action, run_episode
from .harness import (
    CSCAgent,
    ExperimentConfig,
    MetricsSeries,
    chi_schedule,
    export_metrics,
    run_baseline,
    run_csc,
    run_experiment,
    theorem_diagnostics,
)
from .policy import (
    AdvantageEstimates,
    LagrangeState,
    NpgConfig,
    SoftmaxPolicy,
    TaskValueRegressor,
    closed_form_npg,
    fit_task_value,
    gae_modified_advantages,
    lagrange_step,
    npg_update,
)

__version__ = "0.1.0"
