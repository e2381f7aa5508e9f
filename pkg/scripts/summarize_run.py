"""
Print a per-stage summary of a finished (or partial) run directory.

Reads stages.jsonl and, when present, metrics_summary.json.

Run: python scripts/summarize_run.py runs/parametric-coarse
"""

import json
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.artifacts import read_stage_records


def main(run_dir: str) -> int:
    records = read_stage_records(run_dir)
    if not records:
        print(f"No stage records in {run_dir}")
        return 1

    print(f"\nStage Summary ({run_dir}):")
    for r in records:
        d_after = r["distance_after_training"]
        d_text = f"{r['distance']:.4f}" + (f" -> {d_after:.4f}" if d_after is not None else "")
        print(f"  stage {r['stage']} (t={r['stage_time']}): {r['status']}, D={d_text}, sigma_eq={r['sigma_eq']:.4f}")
        if r["d_nn"] is not None:
            print(f"    d_NN=({r['d_nn'][0]:.3f}, {r['d_nn'][1]:.3f}) stop={r['design_stop']} iterations={r['design_iterations']}")
        if r["error"]:
            print(f"    error: {r['error']}")

    counts: dict[str, int] = {}
    for r in records:
        counts[r["status"]] = counts.get(r["status"], 0) + 1
    print(f"\nStatus counts: {counts}")

    summary_path = os.path.join(run_dir, "metrics_summary.json")
    if os.path.exists(summary_path):
        with open(summary_path) as fh:
            summary = json.load(fh)
        print(f"Final D: {summary['final_distance']:.4f}")
        if "baseline" in summary:
            print(f"Baseline final D: {summary['baseline']['final_distance']:.4f}")
    else:
        print("metrics_summary.json not written (run incomplete or failed)")
    return 0


if __name__ == "__main__":
    target = sys.argv[1] if len(sys.argv) > 1 else "runs/parametric"
    sys.exit(main(target))
