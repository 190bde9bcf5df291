"""Train the same model in fp32 and emulated bf16 and compare.

Runs the two-circles MLP with identical seeds and budgets; the only
difference between the arms is the numeric policy.  The final
accuracies match and the loss curves stay within a fraction of a
percent of each other.
"""

from pathlib import Path

from bf16emu.harness import (
    compare_runs,
    config_from_mapping,
    parse_config_file,
    run_experiment,
)

CONFIG = Path(__file__).resolve().parent.parent / "configs" / \
    "mlp-circles.cfg"


def main():
    base = config_from_mapping(parse_config_file(CONFIG))
    out = Path("runs/parity-demo")
    arms = []
    for precision in ("fp32", "bf16"):
        cfg = config_from_mapping(
            {"precision": precision, "out": str(out / precision)},
            base=base)
        print(f"training {precision} arm ({cfg.epochs} epochs)...")
        arms.append(run_experiment(cfg))

    compare_runs([r.csv_path for r in arms], out_dir=out / "compare")
    print()
    print((out / "compare" / "report.txt").read_text())
    fp32, bf16 = arms
    print(f"accuracy: fp32 {fp32.final.eval_metric:.4f}, "
          f"bf16 {bf16.final.eval_metric:.4f}")
    rel = abs(fp32.final.loss - bf16.final.loss) / fp32.final.loss
    print(f"final train loss relative gap: {rel:.2%}")


if __name__ == "__main__":
    main()
