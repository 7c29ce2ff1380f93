"""Point-based and probabilistic prototype formulations in a small part-based classifier."""

from .data import EmbeddingDataset, SyntheticSpec, generate, load_embeddings, save_embeddings
from .densities import PdfFamily, pdf_eval
from .errors import (ConfigurationError, ContractViolation, DegenerateDistributionError,
                     DomainError, EmptyDatasetError, FormatError, InvalidPrototypeError,
                     NumericalFailure, ProtoformError)
from .formulations import FORMULATION_TAGS, make_formulation
from .geometry import (CosinePrototype, EuclideanPrototype, FisherBinghamPrototype,
                       GaussianPrototype, HyperPGPrototype, MixturePrototype, ScaledDotPrototype,
                       VMFPrototype, similarity, similarity_gradient)
from .losses import LossWeights, total_loss
from .model import Model, ModelConfig, load_checkpoint, make_model, save_checkpoint
from .training import RunReport, TrainConfig, evaluate_top1, train

__version__ = "0.1.0"
