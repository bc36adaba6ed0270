"""colonyseg: synthetic Petri-dish data, U-Net training, and colony-count evaluation.

The toolkit is organized as:

    tensor    4-d float tensor engine, layer graph, gradient checking
    unet      network assembly, prediction, binary checkpoints
    train     losses, Adam, augmentation, training loop, CV grid search
    dishgen   procedural labeled dish generator (PPM/PGM/JSON on disk)
    evalkit   instance extraction, counting MAE, pixel P/R, mAP, overlays
    cli       `colonyseg` command-line front end
"""

from .labels import BACKGROUND, BORDER, BVG_MINUS, BVG_PLUS, CLASS_NAMES, NUM_CLASSES
from .tensor import Graph, GradCheckReport, Parameter, ShapeError, Tensor, grad_check
from .unet import UNetConfig, UNetModel, build_unet, load_weights, predict_mask, save_weights

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND",
    "BORDER",
    "BVG_MINUS",
    "BVG_PLUS",
    "CLASS_NAMES",
    "NUM_CLASSES",
    "Graph",
    "GradCheckReport",
    "Parameter",
    "ShapeError",
    "Tensor",
    "UNetConfig",
    "UNetModel",
    "build_unet",
    "grad_check",
    "load_weights",
    "predict_mask",
    "save_weights",
]
