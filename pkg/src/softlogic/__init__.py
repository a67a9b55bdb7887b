"""Neuro-symbolic reasoning over deep hinge-loss Markov random fields."""
from importlib import resources

from softlogic.grounding import GroundModel, clamp_targets, ground
from softlogic.inference import AdmmSettings, InfeasibleError, latent_inference, map_inference
from softlogic.learning import LearnSettings, TrainingExample, build_examples, learn, project_simplex
from softlogic.logic import clause_distance, lukasiewicz_and, lukasiewicz_not, lukasiewicz_or
from softlogic.model import energy, grad_g, grad_wpsl, grad_y
from softlogic.neural import MLPProvider, ProviderSpec
from softlogic.parser import Database, Program, load_database, parse_program, pretty_print, read_idx

__version__ = "0.1.0"

MODEL_FILES = (
    "mnist_add1_constraint.psl",
    "mnist_add1_latent.psl",
    "mnist_add2_constraint.psl",
    "mnist_add2_latent.psl",
    "visual_sudoku.psl",
    "visual_sudoku_latent.psl",
)


def model_path(name: str):
    """Path of a bundled model file."""
    return resources.files("softlogic") / "models" / name
