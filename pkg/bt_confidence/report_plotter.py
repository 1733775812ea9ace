"""
静态报告绘制模块

训练损失曲线、合成语料规模曲线、置信度度量对比柱状图（PNG）
"""

import logging
from typing import Optional

import matplotlib
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

matplotlib.rcParams['font.sans-serif'] = ['SimHei', 'DejaVu Sans']  # 支持中文显示
matplotlib.rcParams['axes.unicode_minus'] = False

logger = logging.getLogger(__name__)


class ReportPlotter:
    """实验报告绘制器"""

    def __init__(self, dpi: int = 150):
        self.dpi = dpi
        self.fig = None
        self.ax = None

    def _finish(self, save_path: Optional[str]):
        plt.tight_layout()
        if save_path:
            self.fig.savefig(save_path, dpi=self.dpi, bbox_inches='tight')
            logger.info(f"图像已保存至: {save_path}")
        return self.fig

    def plot_loss_curve(self, log: pd.DataFrame, title: str = "训练损失", smooth: int = 1,
                        save_path: Optional[str] = None):
        """
        绘制训练损失曲线与学习率

        Args:
            log: Trainer.history_frame() 的结果，至少包含 step、loss、lr 三列
            smooth: 滑动平均窗口（1 表示不平滑）
            save_path: 保存路径（可选）
        """
        self.fig, self.ax = plt.subplots(figsize=(9, 5))
        loss = log["loss"].rolling(max(1, smooth), min_periods=1).mean()
        self.ax.plot(log["step"], loss, 'b-', linewidth=1.5, label='损失')
        self.ax.set_xlabel('步数', fontsize=12)
        self.ax.set_ylabel('平滑交叉熵', fontsize=12)
        self.ax.set_title(title, fontsize=14, fontweight='bold')
        self.ax.grid(True, alpha=0.3)

        if "lr" in log.columns:
            lr_ax = self.ax.twinx()
            lr_ax.plot(log["step"], log["lr"], 'r--', linewidth=1, label='学习率')
            lr_ax.set_ylabel('学习率', fontsize=12)
            lines = self.ax.get_lines() + lr_ax.get_lines()
            self.ax.legend(lines, [line.get_label() for line in lines], fontsize=10)
        else:
            self.ax.legend(fontsize=10)
        return self._finish(save_path)

    def plot_size_sweep(self, sweep: pd.DataFrame, metric: str = "All", save_path: Optional[str] = None):
        """
        BLEU 随合成语料规模变化的曲线，每个变体一条线

        Args:
            sweep: corpus_size_sweep 返回的表（size, variant, 各测试集, All）
        """
        self.fig, self.ax = plt.subplots(figsize=(9, 6))
        for variant, group in sweep.groupby("variant", sort=True):
            group = group.sort_values("size")
            self.ax.plot(group["size"], group[metric], marker='o', linewidth=2, label=variant)
        self.ax.set_xlabel('合成语料规模（句）', fontsize=12)
        self.ax.set_ylabel(f'BLEU ({metric})', fontsize=12)
        self.ax.set_title('合成语料规模的影响', fontsize=14, fontweight='bold')
        self.ax.grid(True, alpha=0.3)
        self.ax.legend(fontsize=10)
        return self._finish(save_path)

    def plot_measure_comparison(self, table: pd.DataFrame, save_path: Optional[str] = None):
        """
        各置信度度量的 BLEU 中位数柱状图，误差线为各种子的最小/最大值

        Args:
            table: compare_measures / compare_levels 的结果（行为条件，含 median 列与 seed_* 列）
        """
        self.fig, self.ax = plt.subplots(figsize=(9, 6))
        seed_cols = [c for c in table.columns if str(c).startswith("seed_")]
        medians = table["median"].to_numpy(dtype=float)
        x = np.arange(len(table))
        if seed_cols:
            values = table[seed_cols].to_numpy(dtype=float)
            err = np.vstack([medians - values.min(axis=1), values.max(axis=1) - medians])
        else:
            err = None
        self.ax.bar(x, medians, yerr=err, capsize=4, color='steelblue', alpha=0.8)
        for xi, m in zip(x, medians):
            self.ax.text(xi, m, f'{m:.2f}', ha='center', va='bottom', fontsize=9)
        self.ax.set_xticks(x)
        self.ax.set_xticklabels([str(i) for i in table.index])
        self.ax.set_ylabel('BLEU（种子中位数）', fontsize=12)
        self.ax.set_title('置信度度量对比', fontsize=14, fontweight='bold')
        self.ax.grid(True, axis='y', alpha=0.3)
        return self._finish(save_path)

    def close(self):
        if self.fig is not None:
            plt.close(self.fig)
            self.fig = self.ax = None


if __name__ == "__main__":
    plotter = ReportPlotter()
    steps = np.arange(1, 201)
    log = pd.DataFrame({"step": steps, "loss": 5.0 / np.sqrt(steps), "lr": np.minimum(steps / 50, 1.0) * 1e-3})
    plotter.plot_loss_curve(log, smooth=5, save_path="test_loss.png")
    print("测试图像已生成")
