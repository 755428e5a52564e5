"""The decision rules that steer a run, shown on crafted score patterns.

A run keeps iterating while scores hold up, regenerates from the best
iteration after two strict drops in a row, and concludes when either
budget runs out. select_initial picks the best-scoring candidate
description, breaking ties toward the earliest.
"""

from harmonia.evaluate import DecisionConfig, decide, select_initial


def show(history, regen_count, cfg) -> None:
    best = select_initial(history)
    decision = decide(history, best, regen_count, cfg)
    label = decision.kind
    if decision.revert_to is not None:
        label += f" (revert to iteration {decision.revert_to})"
    scores = ", ".join(f"{s:.2f}" for s in history)
    print(f"  [{scores}] regenerations so far: {regen_count} -> {label}")


def main() -> None:
    cfg = DecisionConfig(max_iterations=6, max_regenerations=2)
    print(f"budgets: {cfg.max_iterations} iterations, "
          f"{cfg.max_regenerations} regenerations\n")

    print("rising or flat scores keep the loop going:")
    show([0.50], 0, cfg)
    show([0.50, 0.62], 0, cfg)
    show([0.50, 0.62, 0.62], 0, cfg)

    print("\ntwo strict drops in a row trigger a regeneration from the "
          "best iteration:")
    show([0.50, 0.70, 0.64, 0.58], 0, cfg)

    print("\n...but only while the regeneration budget lasts:")
    show([0.50, 0.70, 0.64, 0.58], 2, cfg)

    print("\nthe iteration cap always concludes, whatever the trend:")
    show([0.50, 0.70, 0.64, 0.58, 0.66, 0.71], 0, cfg)

    print("\ncandidate selection is argmax with ties to the earliest:")
    for scores in ([0.40, 0.90, 0.70], [0.80, 0.80, 0.10]):
        print(f"  scores {scores} -> candidate {select_initial(scores)}")


if __name__ == "__main__":
    main()
