import logging
from pathlib import Path

import numpy as np
import plotly.graph_objects as go

from utils import FormatError

logger = logging.getLogger(__name__)

POSITIVE_COLOR = "#d62728"
NEGATIVE_COLOR = "#1f77b4"


def decision_map_figure(dmap, title=""):
    """
    Sign heatmap over the (alpha, beta) plane with projected samples

    Positive samples are drawn as circles, negative ones as crosses.
    """
    fig = go.Figure()
    fig.add_trace(go.Heatmap(
        x=dmap.alphas,
        y=dmap.betas,
        z=dmap.signs,
        zmin=-1,
        zmax=1,
        colorscale=[[0.0, NEGATIVE_COLOR], [0.5, "#ffffff"], [1.0, POSITIVE_COLOR]],
        opacity=0.35,
        showscale=False,
        name="sign",
    ))
    points = dmap.points_frame()
    for label, symbol, color in ((1, "circle", POSITIVE_COLOR), (-1, "x", NEGATIVE_COLOR)):
        subset = points[points["label"] == label]
        if subset.empty:
            continue
        fig.add_trace(go.Scatter(
            x=subset["alpha"],
            y=subset["beta"],
            mode="markers",
            marker={"symbol": symbol, "color": color, "size": 7},
            name="y = +1" if label > 0 else "y = -1",
        ))
    fig.update_layout(
        title=title,
        xaxis_title="alpha (along v)",
        yaxis_title="beta (along u)",
        yaxis={"scaleanchor": "x"},
        template="plotly_white",
    )
    return fig


def sweep_figure(frame, metric="accuracy", title=""):
    """
    Mean metric against the swept value; epsilon = 0 controls are dashed

    Args:
        frame (pandas.DataFrame): summary_frame output
        metric (str): Column to plot
    """
    if frame.empty or metric not in frame.columns:
        raise FormatError(f"sweep summary has no {metric!r} column")
    fig = go.Figure()
    ok = frame[frame["error"].isna()] if "error" in frame.columns else frame
    control = ok["epsilon"].fillna(np.nan) == 0.0
    for is_control, group in ((False, ok[~control]), (True, ok[control])):
        if group.empty:
            continue
        stats = group.groupby("value")[metric].agg(["mean", "std"]).reset_index()
        fig.add_trace(go.Scatter(
            x=stats["value"],
            y=stats["mean"],
            error_y={"type": "data", "array": stats["std"].fillna(0.0)},
            mode="lines+markers",
            line={"dash": "dash" if is_control else "solid"},
            name="without perturbation" if is_control else "with perturbation",
        ))
    axis = frame["axis"].iloc[0] if "axis" in frame.columns else "value"
    fig.update_layout(title=title, xaxis_title=axis, yaxis_title=metric, template="plotly_white")
    if axis in ("d", "n_adv"):
        fig.update_xaxes(type="log")
    return fig


def write_figure(fig, path, fmt=None):
    """
    Write a figure as html (self-contained, stable div id) or svg (needs kaleido)

    Returns:
        Path: written file
    """
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "html").lower()
    if fmt == "html":
        fig.write_html(path, include_plotlyjs="cdn", full_html=True, div_id=path.stem)
    elif fmt == "svg":
        try:
            fig.write_image(path, format="svg")
        except (ImportError, ValueError, RuntimeError) as exc:
            raise FormatError(f"svg export needs a working kaleido ({exc})")
    else:
        raise FormatError(f"unsupported figure format {fmt!r}")
    logger.debug("wrote figure %s", path)
    return path
