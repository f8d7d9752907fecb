import numpy as np

from balweights import dp
from balweights.core.dataset import GROUPS
from balweights.core.errors import InputError
from balweights.core.estimators import build_balance_target
from balweights.core.imbalance import WeightVector, imbalance_report, uniform_weights
from balweights.helpers.artifacts import read_weights_csv
from balweights.helpers.defend import command_guard
from balweights.helpers.inputs import align_weights, load_estimand, load_inputs


def supplied_weights(run, table):
    frame = read_weights_csv(run.payload["weights"])
    values = align_weights(frame, table)
    group = run.payload.get("group")
    if group is None:
        used = [g for g, flag in zip(GROUPS, (1.0, 0.0)) if np.any(values[table.treatment == flag] != 0)]
        if len(used) != 1:
            raise InputError("weights are nonzero on both arms or on none; name the 'group' in the config")
        group = used[0]
    return WeightVector.on_arm(values, table.treatment, group).validate(table.treatment)


@dp.command("balance", help="report the covariate balance of supplied weights or of the raw arms")
@command_guard("balance")
def cmd_balance(run):
    table, fm = load_inputs(run)
    target = build_balance_target(load_estimand(run, table), table, fm)
    reports = {}
    if run.payload.get("weights"):
        g = supplied_weights(run, table)
        reports[f"{g.group}-unweighted"] = imbalance_report(table, fm, uniform_weights(table.treatment, g.group), target)
        reports[f"{g.group}-weighted"] = imbalance_report(table, fm, g, target)
    else:
        for group in GROUPS:
            if table.arm_mask(group).any():
                reports[group] = imbalance_report(table, fm, uniform_weights(table.treatment, group), target)
    if not reports:
        raise InputError("no arm has units to report on")
    document = {"target": target.to_dict(), "reports": {k: r.to_dict() for k, r in reports.items()}}
    text = "\n\n".join(f"[{name}]\n{report.to_text()}" for name, report in reports.items())
    run.write_artifact("balance.json", document)
    run.write_text("balance.txt", text)
    run.emit({"reports": sorted(reports)}, text)
