from dataclasses import replace

from balweights import dp
from balweights.core.dataset import BasisSpec, build_features
from balweights.core.estimators import error_decomposition
from balweights.core.pipeline import OutcomeConfig, WeightingConfig, require_converged, run_estimand
from balweights.core.simlab import DGPSpec, generate
from balweights.helpers.artifacts import format_table
from balweights.helpers.defend import command_guard
from balweights.helpers.inputs import load_estimand, load_inputs
from balweights.helpers.logger import LOGGER
from config import DEFAULT_LEVEL


def simulated_inputs(run):
    dgp = DGPSpec.from_dict(run.section("dgp"))
    table, oracles = generate(dgp)
    fm = build_features(table, BasisSpec.from_dict(run.section("basis")))
    LOGGER.info(f"Simulated {table.n} units from the configured design (seed {dgp.seed})")
    return table, fm, oracles


def decompose(table, result, oracles, estimand_kind):
    if result.target.points is not None:
        return None
    population = {"treated": oracles.mu1, "control": oracles.mu0}
    parts = {}
    for group, fit in result.fits.items():
        truth = population[group] if estimand_kind != "att" else None
        parts[group] = error_decomposition(
            table, fit.weights, result.models[group], oracles.regression(group), truth, result.target
        ).to_dict()
    return parts


def balance_table(estimate) -> str:
    sections = []
    for group, before in estimate.imbalance_before.items():
        after = estimate.imbalance_after[group]
        rows = [
            (b["label"], b["imbalance"], a["imbalance"], b["sd_units"], a["sd_units"])
            for b, a in zip(before["features"], after["features"])
        ]
        sections.append(
            f"[{group}] target {before['provenance']}\n"
            + format_table(("feature", "before", "after", "before_sd", "after_sd"), rows)
        )
    return "\n\n".join(sections)


def estimate_text(estimate) -> str:
    ci = "undefined" if estimate.ci is None else f"[{estimate.ci[0]:.6g}, {estimate.ci[1]:.6g}]"
    lines = [
        f"estimand: {estimate.estimand['kind']}",
        f"point:    {estimate.point:.6g}",
        f"variance: {estimate.variance:.6g}",
        f"{estimate.level:.0%} interval: {ci}",
        f"status:   {estimate.status}",
        f"gamma_rms: {estimate.gamma_rms:.6g}",
        "",
        balance_table(estimate),
    ]
    if estimate.decomposition:
        rows = [(g, d["imbalance"], d["noise"], d["sampling"], d["total"]) for g, d in estimate.decomposition.items()]
        lines += ["", format_table(("group", "imbalance", "noise", "sampling", "total"), rows)]
    return "\n".join(lines)


@dp.command("estimate", help="estimate a weighted mean or effect with a Wald interval")
@command_guard("estimate")
def cmd_estimate(run):
    oracles = None
    if run.data is None and run.payload.get("dgp") is not None:
        table, fm, oracles = simulated_inputs(run)
    else:
        table, fm = load_inputs(run)
    estimand = load_estimand(run, table)
    weighting = WeightingConfig.from_dict(run.section("weighting"), run.payload.get("solver"))
    outcome = OutcomeConfig.from_dict(run.payload.get("outcome_model"))
    level = float(run.payload.get("level", DEFAULT_LEVEL))
    result = run_estimand(
        table, fm, estimand, weighting, outcome, level, run.seed, run.threads,
        propensity=None if oracles is None else oracles.propensity,
    )
    estimate = result.estimate
    if oracles is not None:
        estimate = replace(estimate, decomposition=decompose(table, result, oracles, estimand.kind))
    document = {
        "estimate": estimate.to_dict(),
        "fits": {group: fit.to_dict() for group, fit in result.fits.items()},
        "oracle": None if oracles is None else oracles.to_dict(),
    }
    text = estimate_text(estimate)
    run.write_artifact("estimate.json", document)
    run.write_text("estimate.txt", text)
    run.emit({"point": estimate.point, "ci": estimate.ci, "status": estimate.status}, text)
    for fit in result.fits.values():
        require_converged(fit)
