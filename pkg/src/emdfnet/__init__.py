"""EMDFNet: small-object traffic-sign detection with multi-scale feature fusion."""
from .model import EMDFNet, ModelConfig, paper_config, tiny_config

__version__ = "0.1.0"

__all__ = ["EMDFNet", "ModelConfig", "paper_config", "tiny_config", "__version__"]
