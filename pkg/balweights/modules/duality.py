from balweights import dp
from balweights.core.errors import VerificationError
from balweights.core.simlab import DualityCheckConfig, duality_check, duality_table
from balweights.helpers.defend import command_guard
from balweights.helpers.utils import timed


@dp.command("check-duality", help="compare dual-implied weights with a direct primal solve on random problems")
@command_guard("check-duality")
@timed
def cmd_check_duality(run):
    config = DualityCheckConfig.from_dict({**run.payload, "seed": run.seed})
    result = duality_check(config, threads=run.threads)
    text = duality_table(result)
    run.write_artifact("duality.json", {"check": config.to_dict(), **result})
    run.write_text("duality.txt", text)
    run.emit({"failures": result["failures"], "max_discrepancy": result["max_discrepancy"]},
             f"failures: {result['failures']}\nmax discrepancy: {result['max_discrepancy']:.3g}")
    if not result["passed"]:
        raise VerificationError(
            f"{result['failures']} duality instances exceeded tolerance {config.tolerance:g} "
            f"(max discrepancy {result['max_discrepancy']:.3g})"
        )
