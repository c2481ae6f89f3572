"""Edge-dithered adaptive graph convolutional networks in NumPy."""

from .agcn_model import ModelConfig, ParameterSet, init_params, load_checkpoint, model_forward, predict, save_checkpoint
from .edge_dither import (
    DitherConfig,
    DitheredGraphSet,
    EdgeEventCounts,
    count_edge_events,
    dither,
    edge_restore_probability,
    monte_carlo_recovery,
    neighborhood_recovery_probability,
)
from .errors import BoundsError, EdagcnError, NumericError, ParseError, ShapeError, ValidationError
from .graph_core import (
    AdjacencyPowerSet,
    FeatureMatrix,
    Graph,
    LabelData,
    PerturbationDelta,
    adjacency_powers,
    load_edge_list,
    load_features,
    load_labels_and_splits,
)
from .perturb_harness import (
    NoiseConfig,
    WeightedGraph,
    gaussian_noise,
    knn_graph,
    random_edge_insertion,
    simple_targeted_attack,
    stochastic_block_model,
)
from .training import Problem, TrainConfig, check_gradients, evaluate, gradients, loss, train

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
