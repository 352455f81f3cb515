"""flowshift: adaptive feature-set selection for packet pipelines.

Offline, the catalog module turns labelled feature subsets into a cost and
accuracy Pareto front. Online, a drop-driven controller walks that front while
a simulated worker pair processes a packet trace and exports windowed flow
features. The CLI wraps both halves plus trace tooling and report rendering.
"""

__version__ = "0.1.0"

from .catalog import (
    Catalog,
    CandidateModel,
    FeatureSpec,
    ParetoFront,
    aggregate_cost,
    build_front,
    compute_pareto_front,
    enumerate_candidates,
    filter_marginal_gains,
    load_catalog,
    load_front,
    preset_path,
    save_catalog,
    save_front,
)
from .engine import (
    RunReport,
    SimConfig,
    compare_static_vs_adaptive,
    simulate_run,
    sweep_mon_window,
    write_report,
)
from .errors import (
    CatalogError,
    ConfigError,
    FlowshiftError,
    InvariantViolation,
    PipelineError,
    TraceError,
)
from .selector import DropSignal, SelectorParams, SelectorState, SwitchEvent, on_poll, replay_schedule
from .traces import (
    PacketRecord,
    SyntheticProfile,
    Trace,
    concat_phases,
    generate_synthetic,
    load_trace,
    make_three_phase,
    save_trace,
    scale_trace,
)

__all__ = [name for name in dir() if not name.startswith("_")]
