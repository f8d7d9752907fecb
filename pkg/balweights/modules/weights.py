from balweights import dp
from balweights.core.estimators import build_balance_target
from balweights.core.imbalance import imbalance_report
from balweights.core.pipeline import WeightingConfig, fit_weights, require_converged
from balweights.helpers.artifacts import write_weights_csv
from balweights.helpers.defend import command_guard
from balweights.helpers.inputs import load_estimand, load_inputs, unit_ids


@dp.command("weights", help="fit balancing weights and write them with the solver and balance reports")
@command_guard("weights")
def cmd_weights(run):
    table, fm = load_inputs(run)
    group = run.payload.get("group", "treated")
    estimand = load_estimand(run, table)
    target = build_balance_target(estimand, table, fm)
    weighting = WeightingConfig.from_dict(run.section("weighting"), run.payload.get("solver"))
    fit = fit_weights(table, fm, target, group, weighting, threads=run.threads, seed=run.seed)
    report = imbalance_report(table, fm, fit.weights, target, fit.gram)

    write_weights_csv(run.path("weights.csv"), unit_ids(table), fit.weights.values, table.treatment)
    run.write_artifact("solution.json", {"fit": fit.to_dict(), "target": target.to_dict(), "features": list(fm.labels)})
    run.write_artifact("imbalance.json", {"imbalance": report.to_dict()})
    run.write_text("imbalance.txt", report.to_text())

    summary = {"method": fit.method, "group": group, "converged": fit.converged, "status": fit.status,
               "effective_sample_size": report.effective_sample_size}
    run.emit(summary, f"{fit.method} weights on the {group} arm: {fit.status}\n\n{report.to_text()}")
    require_converged(fit)
