from ._resilsim import (
    CostModel,
    MicroBatch,
    RunResult,
    ScenarioError,
    fit_cost_model,
    pack_sequences,
    run,
    run_text,
)

__all__ = [
    "CostModel",
    "MicroBatch",
    "RunResult",
    "ScenarioError",
    "fit_cost_model",
    "pack_sequences",
    "run",
    "run_text",
]
