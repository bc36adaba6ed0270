"""Pixel class ids shared by the generator, the losses, and the metrics."""

BACKGROUND = 0
BVG_PLUS = 1
BVG_MINUS = 2
BORDER = 3

NUM_CLASSES = 4

CLASS_NAMES = {
    BACKGROUND: "background",
    BVG_PLUS: "bvg+",
    BVG_MINUS: "bvg-",
    BORDER: "border",
}

COLONY_KINDS = (BVG_PLUS, BVG_MINUS)
