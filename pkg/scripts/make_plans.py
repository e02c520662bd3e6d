"""Regenerate the shipped desk-scale experiment plans in ./plans."""

import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from edgeinfer.harness import desk_plan

COMPARISON_SET = ("hc-mappo-l", "h-mappo", "heuristic-mappo-l", "greedy")
ALL_ALGOS = (
    "hc-mappo-l",
    "h-mappo",
    "hc-ippo-l",
    "h-ippo",
    "heuristic-mappo-l",
    "local-only",
    "edge-only",
    "greedy",
)

GFLOPS = 1e9
GB = 1e9

PLANS = {
    "desk_default": dict(algorithms=("hc-mappo-l",)),
    "convergence_baselines": dict(algorithms=ALL_ALGOS),
    "sweep_weight_ratio": dict(
        algorithms=("hc-mappo-l",),
        sweep_axis="weight-ratio",
        axis_values=(0.2, 0.5, 1.0, 2.0, 5.0),
    ),
    "sweep_users": dict(
        algorithms=COMPARISON_SET, sweep_axis="users", axis_values=(6, 8, 10, 12)
    ),
    "sweep_servers": dict(
        algorithms=COMPARISON_SET, sweep_axis="servers", axis_values=(2, 3, 4, 5)
    ),
    "sweep_services_per_model": dict(
        algorithms=COMPARISON_SET, sweep_axis="services-per-model", axis_values=(1, 2, 3)
    ),
    "sweep_delay_constraint": dict(
        algorithms=COMPARISON_SET,
        sweep_axis="tau-bar",
        axis_values=(2.0, 2.5, 3.0, 3.5, 4.0),
    ),
    "sweep_user_compute": dict(
        algorithms=COMPARISON_SET,
        sweep_axis="user-compute",
        axis_values=(
            (10 * GFLOPS, 20 * GFLOPS),
            (30 * GFLOPS, 40 * GFLOPS),
            (50 * GFLOPS, 60 * GFLOPS),
            (70 * GFLOPS, 80 * GFLOPS),
        ),
    ),
    "sweep_server_compute": dict(
        algorithms=COMPARISON_SET,
        sweep_axis="server-compute",
        axis_values=(
            (400 * GFLOPS, 600 * GFLOPS),
            (1000 * GFLOPS, 1500 * GFLOPS),
            (2000 * GFLOPS, 3000 * GFLOPS),
        ),
    ),
    "sweep_server_storage": dict(
        algorithms=COMPARISON_SET,
        sweep_axis="server-storage",
        axis_values=(
            (int(0.55 * GB), int(0.75 * GB)),
            (int(0.7 * GB), int(1.0 * GB)),
            (int(0.9 * GB), int(1.2 * GB)),
            (int(1.2 * GB), int(1.5 * GB)),
        ),
    ),
}


def main() -> None:
    out_dir = os.path.join(os.path.dirname(__file__), "..", "plans")
    os.makedirs(out_dir, exist_ok=True)
    for name, overrides in PLANS.items():
        plan = desk_plan(name=name, **overrides)
        plan.validate()
        path = os.path.join(out_dir, f"{name}.json")
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(plan.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
