from maxfolio.blackbox.records import (
    ExitStatus,
    RunRecord,
    RunStore,
    load_runs,
    read_run_log,
)
from maxfolio.blackbox.runner import (
    LimitEnforcementError,
    RunLimits,
    execute,
    run_batch,
    run_process,
)
from maxfolio.blackbox.scenario import (
    Scenario,
    ScenarioError,
    load_scenario,
    parse_scenario,
)
from maxfolio.blackbox.space import (
    Categorical,
    Configuration,
    Integer,
    ParamDef,
    ParameterSpace,
    Real,
    SpaceError,
    default_config,
    render_cmdline,
    sample_config,
)

__all__ = [
    "Categorical",
    "Configuration",
    "ExitStatus",
    "Integer",
    "LimitEnforcementError",
    "ParamDef",
    "ParameterSpace",
    "Real",
    "RunLimits",
    "RunRecord",
    "RunStore",
    "Scenario",
    "ScenarioError",
    "SpaceError",
    "default_config",
    "execute",
    "load_runs",
    "load_scenario",
    "parse_scenario",
    "read_run_log",
    "render_cmdline",
    "run_batch",
    "run_process",
    "sample_config",
]
