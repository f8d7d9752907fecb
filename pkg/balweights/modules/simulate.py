from balweights import dp
from balweights.core.errors import InputError
from balweights.core.simlab import ConvergenceConfig, CoverageConfig, convergence_experiment, coverage_experiment
from balweights.helpers.defend import command_guard
from balweights.helpers.utils import timed

EXPERIMENTS = ("convergence", "coverage")


@dp.command("simulate", help="run the weight convergence or interval coverage experiment")
@command_guard("simulate")
@timed
def cmd_simulate(run):
    kind = run.payload.get("experiment")
    if kind not in EXPERIMENTS:
        raise InputError(f"experiment must be one of {EXPERIMENTS}, got {kind!r}")
    payload = {**run.payload, "seed": run.seed}
    if kind == "convergence":
        result = convergence_experiment(ConvergenceConfig.from_dict(payload), threads=run.threads)
    else:
        result = coverage_experiment(CoverageConfig.from_dict(payload), threads=run.threads)
    text = result.to_text()
    run.write_artifact(f"{kind}.json", {"result": result.to_dict()})
    run.write_text(f"{kind}.txt", text)
    summary = {"experiment": kind, "excluded": result.excluded}
    if kind == "coverage":
        summary.update(coverage=result.coverage, degenerate=result.degenerate)
    else:
        summary.update(strictly_decreasing=not result.violation, rmse=result.rmse_weights)
    run.emit(summary, text)
