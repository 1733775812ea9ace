"""
交互式报告绘制模块（Plotly版本）

- 合成语料规模曲线（悬停显示各测试集分数）
- 注意力权重热力图：词级置信度调制前后对照
导出为独立 HTML，可直接在浏览器中查看。
"""

import logging
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from .errors import DimensionError

logger = logging.getLogger(__name__)

FONT = {'family': 'SimHei, Arial'}


class InteractiveReportPlotter:
    """交互式报告绘制器（基于Plotly）"""

    def __init__(self):
        self.config = {
            'displayModeBar': True,
            'displaylogo': False,
            'toImageButtonOptions': {
                'format': 'png',
                'filename': 'bt_confidence_report',
                'height': 900,
                'width': 1400,
                'scale': 2
            }
        }

    def plot_size_sweep_interactive(self, sweep: pd.DataFrame, metric: str = "All") -> go.Figure:
        """
        绘制交互式的 BLEU-合成语料规模曲线

        Args:
            sweep: corpus_size_sweep 返回的表，包含 size、variant 与各测试集 BLEU 列

        Returns:
            Plotly图形对象
        """
        test_cols = [c for c in sweep.columns if c not in ("size", "variant")]
        fig = go.Figure()
        for variant, group in sweep.groupby("variant", sort=True):
            group = group.sort_values("size")
            hover = [
                "<br>".join(f"<b>{c}</b>: {row[c]:.2f}" for c in test_cols)
                for _, row in group.iterrows()
            ]
            fig.add_trace(go.Scatter(
                x=group["size"],
                y=group[metric],
                mode='lines+markers',
                name=str(variant),
                line=dict(width=3),
                marker=dict(size=8),
                text=hover,
                hovertemplate='<b>规模</b>: %{x}<br>%{text}<extra></extra>'
            ))
        fig.update_layout(
            title='合成语料规模的影响',
            xaxis_title='合成语料规模（句）',
            yaxis_title=f'BLEU ({metric})',
            hovermode='closest',
            plot_bgcolor='white',
            font=FONT,
            width=1000,
            height=650
        )
        fig.update_xaxes(showgrid=True, gridwidth=0.5, gridcolor='lightgray')
        fig.update_yaxes(showgrid=True, gridwidth=0.5, gridcolor='lightgray')
        return fig

    def plot_attention_confidence(self, weights: np.ndarray, confidence: Sequence[float],
                                  source_tokens: Sequence[str],
                                  target_tokens: Optional[Sequence[str]] = None) -> go.Figure:
        """
        并排绘制调制前的注意力权重与按源端位置乘以置信度之后的权重

        Args:
            weights: (目标长度, 源端长度) 的注意力权重（每行和为 1）
            confidence: 长度等于源端长度的词级置信度 c
            source_tokens: 源端 token，作为横轴标签
            target_tokens: 目标端 token，作为纵轴标签（可选）

        Returns:
            Plotly图形对象

        Raises:
            DimensionError: 权重、置信度与 token 的长度不一致
        """
        weights = np.asarray(weights, dtype=float)
        c = np.asarray(confidence, dtype=float)
        if weights.ndim != 2 or weights.shape[1] != len(c) or len(c) != len(source_tokens):
            raise DimensionError(f"注意力 {weights.shape}、置信度 {c.shape} 与源端 token 数 {len(source_tokens)} 不一致")
        if target_tokens is None:
            target_tokens = [str(i) for i in range(weights.shape[0])]
        modulated = weights * c[None, :]
        x_labels = [f"{tok} ({ci:.2f})" for tok, ci in zip(source_tokens, c)]

        fig = make_subplots(rows=1, cols=2, subplot_titles=('原始注意力', '置信度调制后'), horizontal_spacing=0.12)
        for col, z in ((1, weights), (2, modulated)):
            fig.add_trace(go.Heatmap(
                z=z, x=x_labels, y=list(target_tokens),
                zmin=0.0, zmax=float(weights.max()) if weights.size else 1.0,
                colorscale='Blues', showscale=(col == 2),
                hovertemplate='<b>源端</b>: %{x}<br><b>目标端</b>: %{y}<br><b>权重</b>: %{z:.4f}<extra></extra>'
            ), row=1, col=col)
        fig.update_yaxes(autorange='reversed')
        fig.update_layout(title='词级置信度对注意力的调制', font=FONT, width=1200, height=550,
                          plot_bgcolor='white')
        return fig

    def save_html(self, fig: go.Figure, path: str):
        fig.write_html(path, config=self.config, include_plotlyjs='cdn')
        logger.info(f"交互式图表已生成: {path}")


if __name__ == "__main__":
    plotter = InteractiveReportPlotter()
    w = np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3]])
    fig = plotter.plot_attention_confidence(w, [1.0, 0.4, 0.9], ["ba", "de", "fi"], ["chaja", "jeqe"])
    plotter.save_html(fig, "test_attention.html")
