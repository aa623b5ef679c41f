"""Synthetic corpus generation and manifest-to-dataset loading."""

from __future__ import annotations

import logging
import warnings
from pathlib import Path

import numpy as np

from .config import Config, dump_config, load_config
from .features import (CmvnStats, ManifestRecord, apply_cmvn, compute_cmvn, load_utterance, read_manifest,
                       synth_utterance, write_manifest)
from .training import Dataset, load_cmvn, save_cmvn

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
SPLIT_SEED_STRIDE = 1_000_000


def split_sizes(cfg: Config) -> dict[str, int]:
    s = cfg.synth
    return {"train": s.num_train, "dev": s.num_dev, "test": s.num_test}


def split_records(cfg: Config, split: str) -> list[ManifestRecord]:
    s = cfg.synth
    n = split_sizes(cfg)[split]
    base = (s.seed * len(SPLITS) + SPLITS.index(split)) * SPLIT_SEED_STRIDE
    records = []
    for i in range(n):
        accent = i % s.accents
        seed = base + i
        utt = synth_utterance(accent, seed, s)
        records.append(ManifestRecord(f"{split}-{i:05d}", f"synth:{seed}", utt.transcript, accent))
    return records


def gen_corpus(cfg: Config, out_dir: str | Path) -> dict[str, Path]:
    """Write train/dev/test manifests, the corpus config and global CMVN stats."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in SPLITS:
        paths[split] = out / f"{split}.tsv"
        write_manifest(paths[split], split_records(cfg, split))
    (out / "corpus.conf").write_text(dump_config(cfg), encoding="utf-8")
    train = [load_utterance(r, cfg.synth).features for r in read_manifest(paths["train"])]
    save_cmvn(out / "cmvn.qfn", compute_cmvn(train))
    return paths


def corpus_config(data_dir: str | Path) -> Config:
    return load_config(Path(data_dir) / "corpus.conf")


def load_dataset(manifest: str | Path, cfg: Config, cmvn: CmvnStats | None) -> Dataset:
    """Materialise and normalise every utterance of a manifest; unreadable ones are skipped."""
    manifest = Path(manifest)
    ids, feats, transcripts, accents, skipped = [], [], [], [], []
    for rec in read_manifest(manifest):
        try:
            utt = load_utterance(rec, cfg.synth, manifest.parent)
        except (OSError, ValueError) as e:
            warnings.warn(f"skipping {rec.utt_id}: {e}", stacklevel=2)
            skipped.append(rec.utt_id)
            continue
        x = utt.features.frames
        if cfg.features.cmvn == "utterance":
            x = apply_cmvn(x, compute_cmvn([x]))
        elif cmvn is not None:
            x = apply_cmvn(x, cmvn)
        ids.append(utt.id)
        feats.append(np.asarray(x, dtype=np.float32))
        transcripts.append(utt.transcript)
        accents.append(utt.accent_label)
    return Dataset(ids, feats, transcripts, accents, skipped)


def load_split(data_dir: str | Path, split: str, cfg: Config | None = None) -> Dataset:
    data_dir = Path(data_dir)
    cfg = cfg or corpus_config(data_dir)
    cmvn = load_cmvn(data_dir / "cmvn.qfn")
    return load_dataset(data_dir / f"{split}.tsv", cfg, cmvn)
