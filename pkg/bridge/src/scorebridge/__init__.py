"""Scoring bridge: real image classifiers behind the v1 wire protocol.

The bridge loads a torchvision architecture, applies the model's expected
input normalization server-side (clients always ship raw [0, 1] pixels), and
answers batch score requests over TCP.  Oversized batches are split into
model-sized chunks internally — never rejected — with request order preserved.
"""

from .models import BridgeConfig, TorchScorer, load_model, self_test
from .server import BridgeServer, serve

__all__ = [
    "BridgeConfig",
    "TorchScorer",
    "load_model",
    "self_test",
    "BridgeServer",
    "serve",
]

__version__ = "0.1.0"
