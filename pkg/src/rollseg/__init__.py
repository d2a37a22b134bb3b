"""rollseg: frame-level note segmentation of pitch activity matrices.

Three strategies turn a log-scaled activity matrix into a binary
pianoroll: a hard threshold, a two-state HMM with a fixed sigmoid
observation model, and the same HMM with per-pitch sigmoid parameters
fitted by Nelder-Mead on annotated pieces.
"""

__version__ = "0.1.0"

from .core import (ActivityMatrix, DatasetManifest, FormatError, FrameGrid, NoteEvent, NumericalError,
                   PianoRoll, Piece, PieceEntry, RollsegError, ShapeError, load_activity_matrix,
                   load_corpus, load_manifest, load_pianoroll, normalize_and_log, pianoroll_to_notes,
                   sample_pianoroll, save_activity_matrix, save_manifest, save_pianoroll)
from .evaluation import CVConfig, EvaluationReport, leave_one_out, monte_carlo_cv, ratio_sweep
from .metrics import FrameCounts, Metrics, compute_metrics, frame_counts
from .midi import MidiError, parse_smf, smf_to_notes, write_smf
from .optimize import SimplexOptions, lmse, nelder_mead, select_beta_ht, train_ost
from .segmentation import (HardThreshold, HmmParamSet, OptimizedSoftThreshold, PitchHmmParams,
                           SoftThreshold, Transitions, estimate_transitions, forward_backward,
                           observation_posterior_on, segment, viterbi)
from .synth import SynthSpec, generate_corpus, generate_piece, write_corpus

__all__ = [name for name in dir() if not name.startswith("_")]
