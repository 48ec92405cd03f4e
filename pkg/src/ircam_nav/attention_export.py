"""Dump decoder attention from one greedy episode as CSV tables for plotting."""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .config import SimConfig
from .network import AUDIO, VISUAL, AttentionCapture, IrcamNetwork, greedy_actions
from .sim import NavEnv, SoundLibrary
from .tensor import no_grad

logger = logging.getLogger(__name__)

SUMMARY_FILE = "cross_modal_summary.csv"
SUMMARY_HEADER = ("step", "iteration", "audio_mass", "visual_mass", "decoded_mass", "av_correlation")


@dataclass
class AttentionExport:
    out_dir: Path
    steps: int
    table_files: List[Path] = field(default_factory=list)
    summary_file: Optional[Path] = None


def table_name(step: int, iteration: int, head: int) -> str:
    return f"step{step:03d}_iter{iteration}_head{head}.csv"


def key_labels(provenance: Sequence[str]) -> List[str]:
    return [f"{tag}[{k}]" for k, tag in enumerate(provenance)]


def write_attention_table(path: Path, weights: np.ndarray, provenance: Sequence[str]) -> None:
    """``weights`` is ``[Lq, Lk]``; one row per decoder query."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["query"] + key_labels(provenance))
        for q, row in enumerate(weights):
            writer.writerow([q] + [float(w) for w in row])


def modality_masses(weights: np.ndarray, provenance: Sequence[str]) -> np.ndarray:
    """Mean attention mass on (audio, visual, decoded) keys, averaged over
    heads and queries."""
    per_key = weights.reshape(-1, weights.shape[-1]).mean(axis=0)
    tags = np.asarray(provenance)
    audio = float(per_key[tags == AUDIO].sum())
    visual = float(per_key[tags == VISUAL].sum())
    decoded = float(per_key[(tags != AUDIO) & (tags != VISUAL)].sum())
    return np.array([audio, visual, decoded])


def pooled_correlation(
    weights: np.ndarray, provenance: Sequence[str], encoded: np.ndarray
) -> Optional[float]:
    """Pearson correlation between the attention-pooled audio and visual
    encoder tokens, or None when either modality gets no attention.

    Audio and visual keys keep the encoder's order, so the i-th audio key is
    the i-th audio row of ``encoded``.
    """
    per_key = weights.reshape(-1, weights.shape[-1]).mean(axis=0)
    tags = np.asarray(provenance)
    n_audio = int(np.sum(tags == AUDIO))
    w_audio, w_visual = per_key[tags == AUDIO], per_key[tags == VISUAL]
    if w_audio.sum() <= 0.0 or w_visual.sum() <= 0.0:
        return None
    audio = (w_audio / w_audio.sum()) @ encoded[:n_audio]
    visual = (w_visual / w_visual.sum()) @ encoded[n_audio:]
    if audio.std() == 0.0 or visual.std() == 0.0:
        return None
    return float(np.corrcoef(audio, visual)[0, 1])


def _decoder_captures(captures: Sequence[AttentionCapture]) -> List[AttentionCapture]:
    return [c for c in captures if c.stage == "decoder"]


def export_attention(
    network: IrcamNetwork,
    world_seed: int,
    out_dir: Union[str, Path],
    sim_cfg: SimConfig,
    library: SoundLibrary,
    split: str = "heard",
    max_steps: Optional[int] = None,
) -> AttentionExport:
    """Run one greedy episode on ``world_seed`` with attention capture on,
    optionally stopping after ``max_steps`` steps."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    env = NavEnv(sim_cfg, library, split=split, seed=world_seed)
    env.reset(world_seed)
    export = AttentionExport(out_dir, 0)
    summary_rows = []

    step = 0
    while True:
        with no_grad():
            output, forward = network.policy(env.observation, capture=True)
        encoded = forward.encoded.data
        for capture in _decoder_captures(forward.attention):
            for head in range(capture.weights.shape[0]):
                path = out_dir / table_name(step, capture.index, head)
                write_attention_table(path, capture.weights[head], capture.key_provenance)
                export.table_files.append(path)
            audio, visual, decoded = modality_masses(capture.weights, capture.key_provenance)
            corr = pooled_correlation(capture.weights, capture.key_provenance, encoded)
            summary_rows.append(
                [step, capture.index, audio, visual, decoded, "" if corr is None else corr]
            )
        result = env.step(int(greedy_actions(output.action_logits.data)[0]))
        step += 1
        if result.done or (max_steps is not None and step >= max_steps):
            break

    export.steps = step
    export.summary_file = out_dir / SUMMARY_FILE
    with open(export.summary_file, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SUMMARY_HEADER)
        writer.writerows(summary_rows)
    logger.info("exported %d attention tables over %d steps to %s", len(export.table_files), step, out_dir)
    return export
