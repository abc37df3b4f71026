"""Help text for the command line."""

COMMANDS = {
    "simulate": "generate (particle, bimodal) or ingest (csv) the series -> data.csv",
    "train": "fit the conditional flow on the training split -> model.json, loss_trace.csv",
    "calibrate": "score the calibration split -> calibration.json",
    "region": "prediction region of one test series -> region.json, region.csv",
    "coverage": "empirical coverage per epsilon on the test split -> coverage.json, coverage.csv",
    "sample": "forecast trajectories of one test series -> samples.csv",
}


def display_help():
    """Command overview shown under --help."""
    lines = ["commands (run in this order):"]
    for name, summary in COMMANDS.items():
        lines.append(f"  {name:<10} {summary}")
    lines.append("")
    lines.append("exit codes: 0 ok, 2 config, 3 data, 4 divergence, 5 density,")
    lines.append("            6 hash mismatch, 7 I/O")
    return "\n".join(lines)
