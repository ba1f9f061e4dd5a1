"""oodkit: train a small CNN classifier, fine-tune it to suppress background
feature activations, and evaluate OOD detection with post-hoc scores.

Submodule imports are lazy so the CLI can apply BLAS thread caps
(OODKIT_THREADS) before NumPy is loaded.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "SGD": "autodiff",
    "Tensor": "autodiff",
    "no_grad": "autodiff",
    "EncoderConfig": "model",
    "ModelState": "model",
}

__all__ = [*_EXPORTS, "__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
