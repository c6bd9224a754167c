from .dct import ToyDCTCodec
from .descriptor import (
    CodecCategory,
    CodecDescriptor,
    CodecError,
    DecodeError,
    DuplicateCodecError,
    ExternalCodecError,
    OptimizationMetric,
    UnknownCodecError,
    VisualPayload,
    as_image,
)
from .external import ExternalCodec, ExternalCodecSpec, parse_manifest, register_manifest
from .neural import ToyNeuralCodec, TrainingDiverged, train_toy_neural_codec
from .registry import BasicCodec, CodecRegistry, RegistryHandle

TOY_DCT = "toy-dct"
DEFAULT_DCT_QUALITIES = (5, 10, 15, 20, 50, 95)


def toy_dct(qf: float) -> CodecDescriptor:
    return CodecDescriptor(CodecCategory.TRADITIONAL, TOY_DCT, OptimizationMetric.PSNR, qf)


def default_registry(qualities=DEFAULT_DCT_QUALITIES) -> CodecRegistry:
    """Registry with the built-in toy-DCT codec at the given quality factors.

    Codec ids follow registration order, so encoder and decoder must build
    their registries the same way.
    """
    registry = CodecRegistry()
    impl = ToyDCTCodec()
    for q in qualities:
        registry.register(toy_dct(q), impl)
    return registry


__all__ = [
    "BasicCodec",
    "CodecCategory",
    "CodecDescriptor",
    "CodecError",
    "CodecRegistry",
    "DecodeError",
    "DuplicateCodecError",
    "ExternalCodec",
    "ExternalCodecError",
    "ExternalCodecSpec",
    "OptimizationMetric",
    "RegistryHandle",
    "TOY_DCT",
    "ToyDCTCodec",
    "ToyNeuralCodec",
    "TrainingDiverged",
    "UnknownCodecError",
    "VisualPayload",
    "as_image",
    "default_registry",
    "parse_manifest",
    "register_manifest",
    "toy_dct",
    "train_toy_neural_codec",
]
