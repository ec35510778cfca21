"""Knowledge-graph-conditioned generative zero-shot learning on numpy."""
from .autodiff import Tensor, grad, no_grad
from .classifier import GZSL, ZSL, DatasetSplit, SoftmaxClassifier, assemble_training_set, predict_topk, train_softmax
from .evaluation import EvalReport, harmonic_mean, macro_average, make_report, per_class_hit_at_k
from .features import FeatureSet, load_features, save_features
from .gae import ClassEmbeddingTable, GaeConfig, train_gae
from .gan import GanCheckpoint, GanConfig, synthesize_unseen, train_gan
from .kg import KnowledgeGraph, edge_sets_for_decoder, extract_views, load_graph, save_graph
from .pipeline import PipelineConfig, embed_classes, run_pipeline
from .synth import WorldSpec, bayes_oracle_accuracy, generate_world, sample_dataset

__version__ = "0.1.0"
