from .gen import gen
from .train import train
from .evaluate import evaluate
from .gradcheck import gradcheck
from .compare import compare
from .ablate import ablate


__all__ = [
    "gen",
    "train",
    "evaluate",
    "gradcheck",
    "compare",
    "ablate",
]
