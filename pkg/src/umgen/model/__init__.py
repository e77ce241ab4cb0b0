from .bundle import ModelBundle, load_bundle, save_bundle
from .config import ModelConfig

__all__ = ["ModelBundle", "load_bundle", "save_bundle", "ModelConfig"]
