"""Module containers: parameter registration, traversal, modes, tracing."""
from __future__ import annotations

import threading
from collections import OrderedDict

import numpy as np

from ..errors import NonFiniteError
from ..tensor import Tensor

_local = threading.local()


def _stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
        _local.tracer = None
    return _local.stack


def _child_name(parent, child):
    for name, m in parent._modules.items():
        if m is child:
            return name
    # called through a container that was not itself called (e.g. ModuleList)
    for name, m in parent.named_modules(remove_duplicate=False):
        if m is child:
            return name
    return type(child).__name__


def current_path():
    """Dotted path of the module currently executing, relative to the outermost call."""
    stack = _stack()
    return ".".join(_child_name(p, c) for p, c in zip(stack, stack[1:]))


def set_tracer(tracer):
    _stack()
    prev, _local.tracer = _local.tracer, tracer
    return prev


class Parameter(Tensor):
    """A leaf tensor that a module owns and an optimizer updates."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

    def __repr__(self):
        return f"Parameter(shape={self.shape}, dtype={self.dtype.name})"


class Module:
    """Base class for layers: holds parameters, buffers and child modules."""

    def __init__(self):
        object.__setattr__(self, "_parameters", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        params = self.__dict__.get("_parameters")
        if params is None:
            raise AttributeError("Module.__init__() must run before assigning attributes")
        for d in (self._parameters, self._modules, self._buffers):
            d.pop(name, None)
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        else:
            object.__setattr__(self, name, value)

    def __getattr__(self, name):
        d = self.__dict__
        for key in ("_parameters", "_modules", "_buffers"):
            if key in d and name in d[key]:
                return d[key][name]
        raise AttributeError(f"{type(self).__name__} has no attribute '{name}'")

    def __delattr__(self, name):
        for key in ("_parameters", "_modules", "_buffers"):
            if name in self.__dict__[key]:
                del self.__dict__[key][name]
                return
        object.__delattr__(self, name)

    def register_buffer(self, name, value):
        """Non-learnable state (e.g. running statistics) stored as a numpy array."""
        self.__dict__.pop(name, None)
        self._buffers[name] = np.asarray(value)

    def set_buffer(self, name, value):
        self._buffers[name] = np.asarray(value)

    # -- execution ---------------------------------------------------------
    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        stack = _stack()
        stack.append(self)
        try:
            out = self.forward(*args, **kwargs)
            tracer = _local.tracer
            if tracer is not None:
                tracer.record(current_path(), self, args, out)
            return out
        except NonFiniteError as e:
            raise e.with_layer(current_path() or type(self).__name__)
        finally:
            stack.pop()

    def macs(self, inputs, output):
        """Multiply-accumulates performed by this module itself (children excluded)."""
        return 0

    # -- traversal -----------------------------------------------------------
    def named_modules(self, prefix="", remove_duplicate=True, _seen=None):
        if _seen is None:
            _seen = set()
        if remove_duplicate:
            if id(self) in _seen:
                return
            _seen.add(id(self))
        yield prefix, self
        for name, m in self._modules.items():
            sub = f"{prefix}.{name}" if prefix else name
            yield from m.named_modules(sub, remove_duplicate, _seen)

    def modules(self):
        for _, m in self.named_modules():
            yield m

    def children(self):
        return iter(self._modules.values())

    def named_parameters(self, prefix="", remove_duplicate=True):
        seen = set()
        for mname, m in self.named_modules(prefix, remove_duplicate=False):
            for pname, p in m._parameters.items():
                if remove_duplicate:
                    if id(p) in seen:
                        continue
                    seen.add(id(p))
                yield (f"{mname}.{pname}" if mname else pname), p

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix="", remove_duplicate=True):
        seen = set()
        for mname, m in self.named_modules(prefix, remove_duplicate=False):
            for bname in m._buffers:
                if remove_duplicate:
                    key = (id(m), bname)
                    if key in seen:
                        continue
                    seen.add(key)
                yield (f"{mname}.{bname}" if mname else bname), m, bname

    def num_parameters(self, unique=True):
        return sum(p.size for _, p in self.named_parameters(remove_duplicate=unique))

    # -- modes ---------------------------------------------------------------
    def train(self, mode=True):
        for _, m in self.named_modules():
            object.__setattr__(m, "training", bool(mode))
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype):
        """Cast every parameter and floating buffer in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m, name in self.named_buffers():
            buf = m._buffers[name]
            if np.issubdtype(buf.dtype, np.floating):
                m._buffers[name] = buf.astype(dtype)
        return self

    def extra_repr(self):
        return ""

    def __repr__(self):
        lines = [f"{type(self).__name__}({self.extra_repr()}"]
        for name, m in self._modules.items():
            sub = repr(m).replace("\n", "\n  ")
            lines.append(f"  ({name}): {sub}")
        if len(lines) == 1:
            return lines[0] + ")"
        return "\n".join(lines) + "\n)"


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, module):
        self._modules[str(len(self._modules))] = module
        return self

    def __getitem__(self, i):
        if isinstance(i, slice):
            return list(self._modules.values())[i]
        return self._modules[str(i % len(self._modules))]

    def __setitem__(self, i, module):
        self._modules[str(i)] = module

    def __len__(self):
        return len(self._modules)

    def __iter__(self):
        return iter(self._modules.values())


class Sequential(ModuleList):
    def forward(self, x):
        for m in self:
            x = m(x)
        return x


class Residual(Module):
    """``x + inner(x)``."""

    def __init__(self, inner):
        super().__init__()
        self.m = inner

    def forward(self, x):
        return x + self.m(x)
