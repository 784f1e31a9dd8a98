#!/usr/bin/env python3
"""Plot one metric from one or more trace files on a shared axis.

Curves are labeled name/seed from the trace header. Needs matplotlib,
which is not a package dependency; everything else in the script is.

    python3 scripts/plot_trace.py runs/quad-feddr/*.trace
    python3 scripts/plot_trace.py --metric grad_map_sq --logy -o g.png ...
    python3 scripts/plot_trace.py --x bytes runs/synth-*/*.trace
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from drfed.harness.trace import Trace  # noqa: E402

METRICS = ("objective", "grad_map_sq", "lyapunov", "train_acc")
XAXES = ("round", "bytes", "time")


def series(trace: Trace, metric: str, xaxis: str):
    xs, ys = [], []
    for rec in trace.records:
        y = getattr(rec, metric)
        if y is None:
            continue
        if xaxis == "round":
            xs.append(rec.k)
        elif xaxis == "bytes":
            xs.append(rec.bytes)
        else:
            if rec.sim_time is None:
                raise SystemExit(
                    f"{trace.header.get('name')}: no sim_time; "
                    "--x time only applies to asynchronous traces")
            xs.append(rec.sim_time)
        ys.append(y)
    return xs, ys


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("traces", nargs="+", help="trace files to overlay")
    ap.add_argument("--metric", choices=METRICS, default="objective")
    ap.add_argument("--x", dest="xaxis", choices=XAXES, default="round")
    ap.add_argument("--logy", action="store_true")
    ap.add_argument("-o", "--output", help="write a png instead of showing")
    args = ap.parse_args(argv)

    import matplotlib
    if args.output:
        matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for path in args.traces:
        tr = Trace.read(path)
        xs, ys = series(tr, args.metric, args.xaxis)
        if not ys:
            print(f"warning: {path} has no '{args.metric}' values",
                  file=sys.stderr)
            continue
        label = f"{tr.header.get('name', Path(path).stem)}" \
                f"/seed{tr.header.get('seed', '?')}"
        ax.plot(xs, ys, label=label, linewidth=1.2)

    ax.set_xlabel(args.xaxis)
    ax.set_ylabel(args.metric)
    if args.logy:
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    if args.output:
        fig.savefig(args.output, dpi=150)
        print(f"wrote {args.output}")
    else:
        plt.show()
    return 0


if __name__ == "__main__":
    sys.exit(main())
