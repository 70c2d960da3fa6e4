"""Locally sparse encoded descriptors for face verification and identification."""

from .descriptors import FaceDescriptor, lsed_descriptor, mean_set_descriptor
from .dictionary import AtomDictionary, AutoencoderModel, MixtureModel, em_train, ksvd_train, sann_train
from .encoding import L1EncoderConfig, SparseCode, make_encoder
from .imaging import PatchGridConfig, Perturbation, perturb, synth_identity_image
from .matching import cohort_normalized_score, hausdorff_distance, raw_distance

__version__ = "0.1.0"

__all__ = [
    "AtomDictionary",
    "AutoencoderModel",
    "FaceDescriptor",
    "L1EncoderConfig",
    "MixtureModel",
    "PatchGridConfig",
    "Perturbation",
    "SparseCode",
    "cohort_normalized_score",
    "em_train",
    "hausdorff_distance",
    "ksvd_train",
    "lsed_descriptor",
    "make_encoder",
    "mean_set_descriptor",
    "perturb",
    "raw_distance",
    "sann_train",
    "synth_identity_image",
]
