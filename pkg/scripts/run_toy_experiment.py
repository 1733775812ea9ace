"""
桌面规模的方向性实验

    measures: 不加权回译 vs PTP / EXP / VAR / CEV（≥ 5 个种子的中位数）
    levels:   CEV 下句级 / 词级置信度的四种组合
    sweep:    合成语料规模 {0, 100, 200, 400}
    conditions: None / Search / Sample × 是否使用置信度，附显著性标记

结果表（CSV）、PNG 与 HTML 图写入 --out-dir。方向性检查只打印结论，不作为断言。
"""

import argparse
import logging
import os
import sys
from pathlib import Path

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from bt_confidence.experiments import compare_levels, compare_measures, condition_table  # noqa: E402
from bt_confidence.interactive_plotter import InteractiveReportPlotter  # noqa: E402
from bt_confidence.pipeline import corpus_size_sweep  # noqa: E402
from bt_confidence.report_plotter import ReportPlotter  # noqa: E402
from bt_confidence.toy_data import toy_pipeline_spec  # noqa: E402

LOG_FORMAT = "%(asctime)s (%(module)s:%(lineno)d) %(levelname)s: %(message)s"


def _check(label: str, ok: bool):
    print(f"  [{'通过' if ok else '未满足'}] {label}")


def run_experiments(out_dir: Path, seeds, max_steps: int, parts):
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = toy_pipeline_spec(out_dir / "work", max_steps=max_steps)
    plotter = ReportPlotter()

    if "measures" in parts:
        print("\n置信度度量对比...")
        table = compare_measures(spec, seeds)
        table.to_csv(out_dir / "measures.csv")
        print(table.round(2).to_string())
        _check("CEV 中位数 ≥ 不加权回译", table.at["cev", "median"] >= table.at["none", "median"])
        plotter.plot_measure_comparison(table, save_path=str(out_dir / "measures.png"))
        plotter.close()

    if "levels" in parts:
        print("\n句级 / 词级置信度...")
        table = compare_levels(spec, seeds)
        table.to_csv(out_dir / "levels.csv")
        print(table.round(2).to_string())
        _check("词级 + 句级 中位数 ≥ 仅句级", table.at["word+sentence", "median"] >= table.at["sentence", "median"])

    if "sweep" in parts:
        print("\n合成语料规模...")
        sweep_spec = toy_pipeline_spec(out_dir / "work_sweep", max_steps=max_steps, n_mono=400)
        sweep = corpus_size_sweep(sweep_spec, [0, 100, 200, 400])
        sweep.to_csv(out_dir / "sweep.csv", index=False)
        print(sweep.round(2).to_string(index=False))
        plotter.plot_size_sweep(sweep, save_path=str(out_dir / "sweep.png"))
        plotter.close()
        interactive = InteractiveReportPlotter()
        interactive.save_html(interactive.plot_size_sweep_interactive(sweep), str(out_dir / "sweep.html"))

    if "conditions" in parts:
        print("\n数据条件...")
        _, _, text = condition_table(spec)
        (out_dir / "conditions.txt").write_text(text + "\n", encoding="utf-8")
        print(text)


def main():
    parser = argparse.ArgumentParser(description="桌面规模的方向性实验")
    parser.add_argument("--out-dir", default="runs/toy_experiment", help="输出目录")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4], help="随机种子")
    parser.add_argument("--max-steps", type=int, default=300, help="每个模型的训练步数")
    parser.add_argument("--parts", nargs="+", default=["measures", "levels", "sweep", "conditions"],
                        choices=["measures", "levels", "sweep", "conditions"], help="要运行的实验")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT)
    run_experiments(Path(args.out_dir), args.seeds, args.max_steps, args.parts)


if __name__ == "__main__":
    main()
