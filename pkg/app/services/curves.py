"""
Training-curve emission: accuracy and loss charts plus the raw log table.
"""
import logging
from pathlib import Path
from typing import Dict, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from ..exceptions import HarnessError  # noqa: E402

logger = logging.getLogger(__name__)

LOG_FILE = "training_log.csv"

# fixed ids and no date stamp so reruns write identical SVG bytes
matplotlib.rcParams["svg.hashsalt"] = "malaria-cells"
SVG_METADATA = {"Date": None}


def _plot(log: pd.DataFrame, train_col: str, val_col: str, ylabel: str, path: Path) -> None:
    epochs = log["epoch"].to_numpy()
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        ax.plot(epochs, log[train_col], marker="o", markersize=3, label="train")
        ax.plot(epochs, log[val_col], marker="o", markersize=3, label="validation")
        if len(epochs) > 1:
            ax.set_xlim(int(epochs.min()), int(epochs.max()))
        else:
            ax.set_xlim(epochs[0] - 0.5, epochs[0] + 0.5)
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata=SVG_METADATA)
    finally:
        plt.close(fig)


def write_training_log(log: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    log.to_csv(path, index=False)
    return path


def read_training_log(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def emit_training_curves(log: pd.DataFrame, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    Write accuracy.svg, loss.svg and training_log.csv.

    Args:
        log: Per-epoch table with epoch, train/val loss and accuracy columns
        out_dir: Destination directory (created if needed)

    Returns:
        Mapping of artifact name to written path
    """
    if log is None or log.empty:
        raise HarnessError("Cannot plot an empty training log")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths = {
        "accuracy": out_dir / "accuracy.svg",
        "loss": out_dir / "loss.svg",
        "log": out_dir / LOG_FILE,
    }
    _plot(log, "train_acc", "val_acc", "accuracy", paths["accuracy"])
    _plot(log, "train_loss", "val_loss", "loss", paths["loss"])
    write_training_log(log, paths["log"])
    logger.info(f"Wrote training curves for {len(log)} epochs to {out_dir}")
    return paths
