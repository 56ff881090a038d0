"""Dataset ingestion, synthetic data, transforms and federated partitioners."""
from .datasets import (
    CIFAR_MEAN,
    CIFAR_STD,
    Dataset,
    concat,
    denormalize,
    load_cifar_bin,
    load_idx,
    load_mnist,
    normalize,
    synth_classification,
    synth_images,
    stratified_sample,
    write_cifar_bin,
    write_idx,
)
from .partition import (
    PartitionPlan,
    data_efficiency_plan,
    largest_remainder,
    partition_dirichlet,
    partition_homogeneous,
)
from .text import VOCAB, char_text_dataset, decode, encode, parse_roles
from .transforms import apply_grayscale_bias, augment, hflip, to_grayscale

__all__ = [
    "CIFAR_MEAN", "CIFAR_STD", "Dataset", "concat", "denormalize", "load_cifar_bin", "load_idx",
    "load_mnist", "normalize", "synth_classification", "synth_images", "stratified_sample", "write_cifar_bin", "write_idx",
    "PartitionPlan", "data_efficiency_plan", "largest_remainder", "partition_dirichlet",
    "partition_homogeneous", "VOCAB", "char_text_dataset", "decode", "encode", "parse_roles",
    "apply_grayscale_bias", "augment", "hflip", "to_grayscale",
]
