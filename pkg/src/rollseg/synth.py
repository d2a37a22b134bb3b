"""Seeded synthetic corpora: Markov-chain pianorolls and noisy activity matrices.

Ground truth is sampled pitch by pitch from the same two-state chain the
segmenter assumes. Activity is a two-level log10 image of the roll with
Gaussian noise in the log domain and optional leakage of on-energy into
neighbouring pitch rows (a crude stand-in for harmonic confusion).
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (DEFAULT_FLOOR_DB, ActivityMatrix, DatasetManifest, FrameGrid, PianoRoll, Piece,
                   PieceEntry, pianoroll_to_notes, save_activity_matrix, save_manifest, save_pianoroll)
from .segmentation import EPS


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings.

    ``tau0``/``tau1`` may be scalars or per-pitch sequences. ``leak_prob``
    is the probability that an active cell leaks into each adjacent pitch
    row; the leaked energy is ``10 ** leak_gain_db`` times the on-level
    energy, added in the linear domain before noise.
    """

    num_pitches: int = 88
    num_frames: int = 6000
    tau0: object = 0.01
    tau1: object = 0.05
    on_level_db: float = 0.0
    off_level_db: float = -5.0
    noise_std_db: float = 0.5
    leak_prob: float = 0.0
    leak_gain_db: float = -1.0
    floor_db: float = DEFAULT_FLOOR_DB
    pitch_offset: int = 21
    frame_period_s: float = 0.01
    clamp_tau: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_pitches < 1 or self.num_frames < 0:
            raise ValueError("need num_pitches >= 1 and num_frames >= 0")
        if not self.floor_db <= self.off_level_db <= 0 or not self.floor_db <= self.on_level_db <= 0:
            raise ValueError("levels must lie within [floor_db, 0]")
        if self.noise_std_db < 0 or not 0 <= self.leak_prob <= 1:
            raise ValueError("noise_std_db must be >= 0 and leak_prob in [0, 1]")
        t0, t1 = (np.asarray(t, dtype=float) for t in (self.tau0, self.tau1))
        if np.any((t0 < 0) | (t0 > 1) | (t1 < 0) | (t1 > 1)):
            raise ValueError("transition probabilities must lie in [0, 1]")

    def taus(self):
        t0 = np.broadcast_to(np.asarray(self.tau0, dtype=float), (self.num_pitches,)).copy()
        t1 = np.broadcast_to(np.asarray(self.tau1, dtype=float), (self.num_pitches,)).copy()
        if self.clamp_tau:
            t0 = np.clip(t0, EPS, 1 - EPS)
            t1 = np.clip(t1, EPS, 1 - EPS)
        return t0, t1

    @property
    def grid(self):
        return FrameGrid(self.num_frames, self.frame_period_s)


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key)))


def _run_lengths(rng, p, size):
    # geometric run lengths >= 1; p == 0 means the run never ends
    if p <= 0:
        return np.full(size, np.iinfo(np.int64).max // 4, dtype=np.int64)
    return rng.geometric(p, size=size).astype(np.int64)


def _sample_chain(rng, tau0, tau1, T):
    row = np.zeros(T, dtype=bool)
    if T == 0 or tau0 <= 0:
        return row
    # with q0 = 0, the first off run may be empty
    pos = int(rng.geometric(tau0)) - 1
    batch = max(16, int(T * min(tau0, 1.0) * 2) + 16)
    while pos < T:
        on = _run_lengths(rng, tau1, batch)
        off = _run_lengths(rng, tau0, batch)
        for a, b in zip(on, off):
            end = min(pos + int(a), T)
            row[pos:end] = True
            pos = end + int(b)
            if pos >= T:
                break
    return row


def generate_pianoroll(spec: SynthSpec, rng=None) -> PianoRoll:
    """Sample each pitch row as a Markov chain started from the off state."""
    rng = rng if rng is not None else _rng(spec.seed, 0)
    t0, t1 = spec.taus()
    active = np.array([_sample_chain(rng, t0[p], t1[p], spec.num_frames) for p in range(spec.num_pitches)])
    active = active.reshape(spec.num_pitches, spec.num_frames)
    return PianoRoll(active, spec.pitch_offset, spec.grid)


def generate_activity(roll: PianoRoll, spec: SynthSpec, rng=None) -> ActivityMatrix:
    """Two-level log activity for ``roll`` with noise and leakage, max pinned to 0."""
    if roll.num_pitches != spec.num_pitches or roll.num_frames != spec.num_frames:
        raise ValueError("roll dimensions do not match the spec")
    rng = rng if rng is not None else _rng(spec.seed, 1)
    on = roll.active
    lin = np.where(on, 10.0 ** spec.on_level_db, 10.0 ** spec.off_level_db)
    if spec.leak_prob > 0 and spec.num_pitches > 1:
        leak = 10.0 ** (spec.on_level_db + spec.leak_gain_db)
        down = on[1:] & (rng.random(on[1:].shape) < spec.leak_prob)  # pitch p leaks into p - 1
        up = on[:-1] & (rng.random(on[:-1].shape) < spec.leak_prob)  # pitch p leaks into p + 1
        lin[:-1] += leak * down
        lin[1:] += leak * up
    x = np.log10(lin)
    if spec.noise_std_db > 0:
        x = x + rng.normal(0.0, spec.noise_std_db, size=x.shape)
    x = np.clip(x, spec.floor_db, 0.0)
    if x.size:
        x = np.maximum(x - x.max(), spec.floor_db)
    return ActivityMatrix(x, roll.pitch_offset, roll.grid)


def generate_piece(spec: SynthSpec, index=0, piece_id=None) -> Piece:
    """Piece ``index`` of the corpus seeded by ``spec.seed``; independent of other pieces."""
    roll = generate_pianoroll(spec, _rng(spec.seed, index, 0))
    act = generate_activity(roll, spec, _rng(spec.seed, index, 1))
    return Piece(piece_id or f"piece{index:03d}", act, roll)


def generate_corpus(spec: SynthSpec, num_pieces) -> list[Piece]:
    return [generate_piece(spec, i) for i in range(num_pieces)]


def _generate_indexed(args):
    return generate_piece(*args)


def write_corpus(out_dir, spec: SynthSpec, num_pieces, gt_format="pianoroll-csv", header=None,
                 dataset="synthetic", jobs=1):
    """Write activity / ground-truth / manifest files; returns the manifest path.

    ``jobs > 1`` generates pieces in worker processes; per-piece seeds make
    the files independent of it.
    """
    from .midi import write_smf

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(spec, i) for i in range(num_pieces)]
    if jobs > 1 and num_pieces > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            pieces = list(ex.map(_generate_indexed, tasks))
    else:
        pieces = [generate_piece(*t) for t in tasks]
    entries = []
    for piece in pieces:
        act_path = out / f"{piece.id}.activity.csv"
        save_activity_matrix(act_path, piece.activity, header)
        if gt_format == "smf":
            gt_path = out / f"{piece.id}.mid"
            # 1 ms ticks keep frame boundaries exact on a 10 ms grid
            ppq = int(round(0.5 / 1e-3))
            gt_path.write_bytes(write_smf(pianoroll_to_notes(piece.truth), ppq=ppq, tempo=500000))
        else:
            gt_path = out / f"{piece.id}.roll.csv"
            save_pianoroll(gt_path, piece.truth, header)
        entries.append(PieceEntry(piece.id, act_path, gt_path, gt_format))
    manifest = DatasetManifest(tuple(entries), dataset, spec.frame_period_s, spec.pitch_offset, spec.floor_db)
    path = out / "manifest.tsv"
    save_manifest(path, manifest, header)
    return path
