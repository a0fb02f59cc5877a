"""Online evolution of a zero-shot classifier over an unlabeled test stream."""
from .data import DatasetBundle, SynthConfig, load_bundle, load_checkpoint, save_bundle, save_checkpoint, synth_generate
from .errors import FormatError, NumericError, ProtocolViolation, ShapeError
from .evolver import AblationFlags, EvolverConfig, evolve_step, init_state
from .harness import (evaluate_model, evolution_curve, format_table, make_stream, run_ablation_suite,
                      run_evolution, run_protocol)
from .model import AttributeTable, BaseTrainConfig, CompatibilityModel, clone_model, predict, train_base

__version__ = "0.1.0"
