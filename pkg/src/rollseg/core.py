"""Shared data model and file I/O.

Activity matrices and pianorolls are stored pitch-major: row ``p`` holds
MIDI pitch ``pitch_offset + p`` and column ``i`` holds the frame starting
at ``origin_s + i * frame_period_s``.

File formats
------------
Activity CSV
    One pitch per row (ascending), one frame per column, ``.`` decimal
    separator. The literal token ``-inf`` is accepted and replaced by the
    silence floor on load. Lines starting with ``#`` are comments.
Pianoroll CSV
    Same layout with ``0``/``1`` values.
Manifest
    Tab-separated, one piece per line::

        # comment lines are ignored
        @dataset baseline
        @frame_period_s 0.01
        @pitch_offset 21
        id<TAB>activity_path<TAB>groundtruth_path<TAB>groundtruth_kind
        piece000<TAB>piece000.activity.csv<TAB>piece000.roll.csv<TAB>pianoroll-csv

    ``@key value`` directives are optional. The column header line is
    required. ``groundtruth_kind`` is ``smf`` or ``pianoroll-csv``;
    relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_FLOOR_DB = -8.0
DEFAULT_PITCH_OFFSET = 21
DEFAULT_NUM_PITCHES = 88
DEFAULT_FRAME_PERIOD_S = 0.01

# frame-boundary snapping, in frames; absorbs float error in onset/period ratios
_SNAP = 1e-9


class RollsegError(Exception):
    """Base class for errors raised by this package."""


class FormatError(RollsegError, ValueError):
    """Malformed input file or byte stream."""


class ShapeError(RollsegError, ValueError):
    """Incompatible matrix dimensions or pitch ranges."""


class NumericalError(RollsegError, ArithmeticError):
    """Non-finite objective or other numerical failure."""


def _readonly(a):
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class FrameGrid:
    """Uniform analysis-frame grid; frame ``i`` starts at ``origin_s + i * frame_period_s``."""

    num_frames: int
    frame_period_s: float = DEFAULT_FRAME_PERIOD_S
    origin_s: float = 0.0

    def __post_init__(self):
        if not self.frame_period_s > 0 or not math.isfinite(self.frame_period_s):
            raise ValueError(f"frame_period_s must be > 0, got {self.frame_period_s}")
        if self.num_frames < 0:
            raise ValueError(f"num_frames must be >= 0, got {self.num_frames}")
        object.__setattr__(self, "num_frames", int(self.num_frames))

    def times(self):
        """Start time of every frame, in seconds."""
        return self.origin_s + np.arange(self.num_frames) * self.frame_period_s

    def frame_time(self, i):
        return self.origin_s + i * self.frame_period_s

    def first_frame_at_or_after(self, t):
        """Smallest frame index whose start time is >= ``t`` (may be out of range)."""
        return int(math.ceil((t - self.origin_s) / self.frame_period_s - _SNAP))


@dataclass(frozen=True)
class ActivityMatrix:
    """Log-scale pitch activity ``X(p, t)``, base-10 log of max-normalised activity."""

    values: np.ndarray
    pitch_offset: int = DEFAULT_PITCH_OFFSET
    grid: FrameGrid = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1:
            raise ShapeError(f"activity must be a 2-D array with >= 1 row, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("activity values must be finite; clamp silence to a floor value")
        object.__setattr__(self, "values", _readonly(values))
        grid = self.grid
        if grid is None:
            grid = FrameGrid(values.shape[1])
        elif grid.num_frames != values.shape[1]:
            raise ShapeError(f"grid has {grid.num_frames} frames but matrix has {values.shape[1]}")
        object.__setattr__(self, "grid", grid)

    @property
    def num_pitches(self):
        return self.values.shape[0]

    @property
    def num_frames(self):
        return self.values.shape[1]

    @property
    def pitches(self):
        return np.arange(self.pitch_offset, self.pitch_offset + self.num_pitches)

    def is_normalized(self):
        return self.values.size > 0 and self.values.max() == 0.0


@dataclass(frozen=True)
class PianoRoll:
    """Binary pitch x frame activity (ground truth or segmentation output)."""

    active: np.ndarray
    pitch_offset: int = DEFAULT_PITCH_OFFSET
    grid: FrameGrid = None

    def __post_init__(self):
        a = np.asarray(self.active)
        if a.ndim != 2 or a.shape[0] < 1:
            raise ShapeError(f"pianoroll must be a 2-D array with >= 1 row, got shape {a.shape}")
        if a.dtype != bool:
            if a.size and not np.all((a == 0) | (a == 1)):
                raise ValueError("pianoroll entries must be 0 or 1")
            a = a.astype(bool)
        object.__setattr__(self, "active", _readonly(a))
        grid = self.grid
        if grid is None:
            grid = FrameGrid(a.shape[1])
        elif grid.num_frames != a.shape[1]:
            raise ShapeError(f"grid has {grid.num_frames} frames but roll has {a.shape[1]}")
        object.__setattr__(self, "grid", grid)

    @property
    def num_pitches(self):
        return self.active.shape[0]

    @property
    def num_frames(self):
        return self.active.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PianoRoll):
            return NotImplemented
        return (self.pitch_offset == other.pitch_offset
                and self.active.shape == other.active.shape
                and bool(np.array_equal(self.active, other.active)))

    __hash__ = None


def check_compatible(a, b, what="matrices"):
    """Raise :class:`ShapeError` unless ``a`` and ``b`` cover the same pitches and frames."""
    sa = (a.num_pitches, a.num_frames)
    sb = (b.num_pitches, b.num_frames)
    if sa != sb:
        raise ShapeError(f"{what} have different shapes: {sa} vs {sb}")
    if a.pitch_offset != b.pitch_offset:
        raise ShapeError(f"{what} have different pitch offsets: {a.pitch_offset} vs {b.pitch_offset}")


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset_s: float
    offset_s: float
    velocity: int = 64

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch must be in 0..127, got {self.pitch}")
        if not (self.onset_s >= 0 and self.offset_s > self.onset_s):
            raise ValueError(f"invalid note interval [{self.onset_s}, {self.offset_s})")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity must be in 1..127, got {self.velocity}")


def note(pitch, onset_s, offset_s, velocity=64):
    return NoteEvent(int(pitch), float(onset_s), float(offset_s), int(velocity))


def sort_notes(notes: Iterable[NoteEvent]) -> list[NoteEvent]:
    """Return ``notes`` sorted by onset, ties broken by pitch ascending."""
    return sorted(notes, key=lambda n: (n.onset_s, n.pitch, n.offset_s))


@dataclass(frozen=True)
class PieceEntry:
    id: str
    activity_path: Path
    groundtruth_path: Path
    groundtruth_kind: str


@dataclass(frozen=True)
class DatasetManifest:
    pieces: tuple
    dataset: str = "unnamed"
    frame_period_s: float = DEFAULT_FRAME_PERIOD_S
    pitch_offset: int = DEFAULT_PITCH_OFFSET
    floor_db: float = DEFAULT_FLOOR_DB

    def __post_init__(self):
        ids = [p.id for p in self.pieces]
        dup = {i for i in ids if ids.count(i) > 1}
        if dup:
            raise FormatError(f"duplicate piece ids in manifest: {sorted(dup)}")
        object.__setattr__(self, "pieces", tuple(self.pieces))

    def __len__(self):
        return len(self.pieces)


@dataclass(frozen=True)
class Piece:
    """A loaded piece: activity matrix plus ground-truth pianoroll on the same grid."""

    id: str
    activity: ActivityMatrix
    truth: PianoRoll

    def __post_init__(self):
        check_compatible(self.activity, self.truth, f"piece {self.id!r} activity and ground truth")


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------

def normalize_and_log(raw, floor_db=DEFAULT_FLOOR_DB, pitch_offset=DEFAULT_PITCH_OFFSET,
                      frame_period_s=DEFAULT_FRAME_PERIOD_S):
    """Map a nonnegative linear activity matrix to the log scale.

    Parameters
    ----------
    raw : array_like, shape (n_pitches, n_frames)
        Linear activity ``P(p, t)``, all entries >= 0.
    floor_db : float
        Value assigned to silent cells, and lower clamp for every cell.

    Returns
    -------
    ActivityMatrix
        ``log10(P / max(P))`` clamped below at ``floor_db``; the maximum
        is exactly 0.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)) or np.any(raw < 0):
        raise ValueError("raw activity must be finite and nonnegative")
    peak = raw.max() if raw.size else 0.0
    if not peak > 0:
        raise ValueError("raw activity has no positive entry to normalise against")
    with np.errstate(divide="ignore"):
        x = np.log10(raw / peak)
    x = np.maximum(x, floor_db)
    return ActivityMatrix(x, pitch_offset, FrameGrid(x.shape[1], frame_period_s))


def sample_pianoroll(notes, grid, pitch_offset=DEFAULT_PITCH_OFFSET, num_pitches=DEFAULT_NUM_PITCHES):
    """Sample note events onto a frame grid.

    Frame ``i`` of pitch ``p`` is active iff some note of that pitch
    satisfies ``onset <= t_i < offset`` with ``t_i`` the frame start time.
    Notes outside ``[pitch_offset, pitch_offset + num_pitches)`` are dropped
    and counted in a :class:`UserWarning`.
    """
    active = np.zeros((num_pitches, grid.num_frames), dtype=bool)
    dropped = 0
    for n in notes:
        row = n.pitch - pitch_offset
        if not 0 <= row < num_pitches:
            dropped += 1
            continue
        lo = max(grid.first_frame_at_or_after(n.onset_s), 0)
        hi = min(grid.first_frame_at_or_after(n.offset_s), grid.num_frames)
        if hi > lo:
            active[row, lo:hi] = True
    if dropped:
        warnings.warn(f"{dropped} note(s) outside pitch range "
                      f"{pitch_offset}..{pitch_offset + num_pitches - 1} dropped", stacklevel=2)
    return PianoRoll(active, pitch_offset, grid)


def pianoroll_to_notes(roll, velocity=64):
    """Convert each maximal run of active frames into a note spanning those frames."""
    g = roll.grid
    out = []
    padded = np.zeros((roll.num_pitches, roll.num_frames + 2), dtype=np.int8)
    padded[:, 1:-1] = roll.active
    d = np.diff(padded, axis=1)
    for row in range(roll.num_pitches):
        starts = np.flatnonzero(d[row] == 1)
        ends = np.flatnonzero(d[row] == -1)
        for s, e in zip(starts, ends):
            out.append(note(roll.pitch_offset + row, g.frame_time(s), g.frame_time(e), velocity))
    return sort_notes(out)


# --------------------------------------------------------------------------
# CSV I/O
# --------------------------------------------------------------------------

def _data_lines(path):
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            yield lineno, s


def _read_grid(path, parse_token):
    rows = []
    width = None
    for lineno, s in _data_lines(path):
        toks = s.split(",")
        r = len(rows) + 1
        if width is None:
            width = len(toks)
        elif len(toks) != width:
            raise FormatError(f"{path}: ragged row {r} (line {lineno}): expected {width} values, found {len(toks)}")
        vals = []
        for c, tok in enumerate(toks, start=1):
            try:
                vals.append(parse_token(tok.strip()))
            except ValueError:
                raise FormatError(f"{path}: cannot parse {tok.strip()!r} at row {r}, column {c} (line {lineno})") from None
        rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: file contains no data rows")
    return rows


def load_activity_matrix(path, floor_db=DEFAULT_FLOOR_DB, pitch_offset=DEFAULT_PITCH_OFFSET,
                         frame_period_s=DEFAULT_FRAME_PERIOD_S):
    """Read an activity CSV; ``-inf`` tokens become ``floor_db``. No normalisation is applied."""
    def parse(tok):
        if tok == "-inf":
            return floor_db
        v = float(tok)
        if not math.isfinite(v):
            raise ValueError(tok)
        return v

    rows = _read_grid(path, parse)
    values = np.array(rows, dtype=float)
    return ActivityMatrix(values, pitch_offset, FrameGrid(values.shape[1], frame_period_s))


def load_pianoroll(path, pitch_offset=DEFAULT_PITCH_OFFSET, frame_period_s=DEFAULT_FRAME_PERIOD_S):
    def parse(tok):
        if tok in ("0", "1"):
            return tok == "1"
        v = float(tok)
        if v not in (0.0, 1.0):
            raise ValueError(tok)
        return v == 1.0

    rows = _read_grid(path, parse)
    active = np.array(rows, dtype=bool)
    return PianoRoll(active, pitch_offset, FrameGrid(active.shape[1], frame_period_s))


def _write_lines(path, header, body_lines):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for h in header or ():
            fh.write(f"# {h}\n")
        for line in body_lines:
            fh.write(line)
            fh.write("\n")
    os.replace(tmp, path)


def format_float(v):
    # shortest repr that round-trips exactly (>= 17 significant digits when needed)
    return repr(float(v))


def save_activity_matrix(path, matrix, header=None):
    """Write ``matrix`` as CSV; values round-trip bit-exactly through :func:`load_activity_matrix`."""
    lines = (",".join(map(format_float, row)) for row in matrix.values.tolist())
    _write_lines(path, header, lines)


def save_pianoroll(path, roll, header=None):
    lines = (",".join("1" if v else "0" for v in row) for row in roll.active.tolist())
    _write_lines(path, header, lines)


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------

GROUNDTRUTH_KINDS = ("smf", "pianoroll-csv")
_MANIFEST_COLUMNS = ["id", "activity_path", "groundtruth_path", "groundtruth_kind"]


def load_manifest(path):
    """Parse a manifest file and check that every referenced file exists."""
    path = Path(path)
    base = path.parent
    meta = {}
    entries = []
    header_seen = False
    for lineno, s in _data_lines(path):
        if s.startswith("@"):
            key, _, value = s[1:].partition(" ")
            meta[key.strip()] = value.strip()
            continue
        cols = [c.strip() for c in s.split("\t")]
        if not header_seen:
            if cols != _MANIFEST_COLUMNS:
                raise FormatError(f"{path}: line {lineno}: expected header {_MANIFEST_COLUMNS}, got {cols}")
            header_seen = True
            continue
        if len(cols) != 4:
            raise FormatError(f"{path}: line {lineno}: expected 4 tab-separated columns, found {len(cols)}")
        pid, act, gt, kind = cols
        if kind not in GROUNDTRUTH_KINDS:
            raise FormatError(f"{path}: line {lineno}: unknown groundtruth_kind {kind!r}")
        act_p, gt_p = base / act, base / gt
        for f in (act_p, gt_p):
            if not f.is_file():
                raise FormatError(f"{path}: line {lineno}: referenced file not found: {f}")
        entries.append(PieceEntry(pid, act_p, gt_p, kind))
    if not header_seen:
        raise FormatError(f"{path}: missing header line")
    try:
        return DatasetManifest(
            tuple(entries),
            dataset=meta.get("dataset", "unnamed"),
            frame_period_s=float(meta.get("frame_period_s", DEFAULT_FRAME_PERIOD_S)),
            pitch_offset=int(meta.get("pitch_offset", DEFAULT_PITCH_OFFSET)),
            floor_db=float(meta.get("floor_db", DEFAULT_FLOOR_DB)),
        )
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{path}: bad directive value: {exc}") from None


def save_manifest(path, manifest, header=None):
    path = Path(path)
    base = path.parent
    lines = [
        f"@dataset {manifest.dataset}",
        f"@frame_period_s {format_float(manifest.frame_period_s)}",
        f"@pitch_offset {manifest.pitch_offset}",
        f"@floor_db {format_float(manifest.floor_db)}",
        "\t".join(_MANIFEST_COLUMNS),
    ]
    for p in manifest.pieces:
        rel = [os.path.relpath(p.activity_path, base), os.path.relpath(p.groundtruth_path, base)]
        lines.append("\t".join([p.id, *[r.replace(os.sep, "/") for r in rel], p.groundtruth_kind]))
    _write_lines(path, header, lines)


def load_piece(entry, manifest):
    """Load one manifest entry, sampling SMF ground truth onto the activity grid."""
    from .midi import parse_smf, smf_to_notes

    act = load_activity_matrix(entry.activity_path, manifest.floor_db, manifest.pitch_offset,
                               manifest.frame_period_s)
    if entry.groundtruth_kind == "smf":
        data = Path(entry.groundtruth_path).read_bytes()
        notes = smf_to_notes(parse_smf(data))
        truth = sample_pianoroll(notes, act.grid, act.pitch_offset, act.num_pitches)
    else:
        truth = load_pianoroll(entry.groundtruth_path, manifest.pitch_offset, manifest.frame_period_s)
    return Piece(entry.id, act, truth)


def load_corpus(manifest) -> list[Piece]:
    return [load_piece(e, manifest) for e in manifest.pieces]


def as_pieces(source) -> Sequence[Piece]:
    """Accept a manifest, a manifest path, or an already-loaded piece list."""
    if isinstance(source, (str, os.PathLike)):
        source = load_manifest(source)
    if isinstance(source, DatasetManifest):
        return load_corpus(source)
    return list(source)
