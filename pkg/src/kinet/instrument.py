"""Record which model tensors a block of code actually reads."""

import torch
from torch.overrides import TorchFunctionMode

from .netcore import state_registry


def _tensors(obj):
    if isinstance(obj, torch.Tensor):
        yield obj
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from _tensors(item)
    elif isinstance(obj, dict):
        for item in obj.values():
            yield from _tensors(item)


class ParameterTouches(TorchFunctionMode):
    """Torch-function mode noting every registered parameter or buffer passed to an op.

    Usage::

        with ParameterTouches(model) as touches:
            model(frames)
        touches.touched  # set of slash-separated names
    """

    def __init__(self, model):
        super().__init__()
        self._names = {id(t): name for name, t in state_registry(model).items()}
        self.touched = set()

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        # attribute lookups such as ``p.grad`` arrive here too but read no data
        if getattr(func, "__name__", None) == "__get__":
            return func(*args, **kwargs)
        for t in _tensors((args, kwargs)):
            name = self._names.get(id(t))
            if name is not None:
                self.touched.add(name)
        return func(*args, **kwargs)

    def touched_under(self, *prefixes):
        return sorted(n for n in self.touched if n.startswith(prefixes))
