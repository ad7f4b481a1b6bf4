"""ashpix: train, evaluate, and apply a conditional adversarial
image-to-image model that delimits volcanic ash clouds in multispectral
satellite imagery.
"""

__version__ = "0.1.0"

from .arch import (ArchitectureSpec, DiscriminatorSpec, GeneratorSpec, LayerSpec,
                   audit_model, receptive_field)
from .errors import (AshpixError, ArchError, CheckpointError, ConfigError,
                     DataError, TrainingError)
from .pipeline import (ImagePair, RawPair, Satellite, SplitManifest,
                       combine_pair, denormalize, normalize, prepare_dataset,
                       resize_image, split_combined, split_dataset)

__all__ = [
    "__version__",
    "ArchitectureSpec", "DiscriminatorSpec", "GeneratorSpec", "LayerSpec",
    "audit_model", "receptive_field",
    "AshpixError", "ArchError", "CheckpointError", "ConfigError", "DataError",
    "TrainingError",
    "ImagePair", "RawPair", "Satellite", "SplitManifest",
    "combine_pair", "denormalize", "normalize", "prepare_dataset",
    "resize_image", "split_combined", "split_dataset",
]
