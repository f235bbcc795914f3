"""Run artifacts: convergence CSV, ledger CSV, and a plain-text summary."""

import math


METRICS_HEADER = "iteration,time_s,loss,val_f1,comm_scalars,mem_scalars"


def write_metrics_csv(records: list, path):
    with open(path, "w") as fh:
        fh.write(METRICS_HEADER + "\n")
        for r in records:
            val = "" if math.isnan(r.val_f1) else f"{r.val_f1:.6f}"
            fh.write(f"{r.iteration},{r.time_s:.6f},{r.loss:.10g},"
                     f"{val},{r.comm_scalars},{r.mem_scalars}\n")


def write_ledger_csv(state, path):
    state.comm_ledger.write_csv(path)


def summary(state, records: list, scores: dict = None) -> str:
    totals = state.comm_ledger.totals()
    lines = ["run summary", "-----------"]
    lines.append(f"iterations completed: {state.iteration}")
    if records:
        lines.append(f"final loss:           {records[-1].loss:.6f}")
        lines.append(f"wall time:            {records[-1].time_s:.2f} s")
    if scores:
        for split in ("train", "val", "test"):
            if split in scores:
                lines.append(f"{split + ' micro-F1:':<22}{scores[split]:.4f}")
    lines.append(f"total scalars sent:   {totals['scalars']}")
    lines.append(f"total ciphertexts:    {totals['ciphertexts']}")
    lines.append(f"total messages:       {totals['messages']}")
    if state.mem_ledger is not None:
        lines.append(f"peak activation mem:  "
                     f"{state.mem_ledger.activation_total()} scalars")
        lines.append(f"parameter mem:        "
                     f"{state.mem_ledger.param_total()} scalars")
    return "\n".join(lines) + "\n"
