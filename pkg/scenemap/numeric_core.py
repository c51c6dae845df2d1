'''
numeric_core.py - float64 tensors, recorded programs and Adam
=============================================================

The descriptor field and the map optimizer both need reverse-mode
differentiation.  Tensors are torch float64 CPU tensors; a
:class:`Tape` is a program over named tensors whose record is the
autograd graph torch builds while it runs.  :func:`forward` evaluates
it, :func:`gradient` differentiates a scalar output back to the named
inputs.

Every evaluation is checked for non-finite values and raises
:class:`~scenemap.errors.NumericError` instead of returning NaN.

The Euclidean norm used by the map costs is :func:`safe_norm`, whose
gradient at the origin is 0.
'''

import torch

from scenemap.errors import NumericError, ValidationError


DTYPE = torch.float64
LAYER_NORM_EPS = 1e-5


def as_tensor(values, requires_grad=False):
    '''float64 tensor copy of *values*.'''
    if isinstance(values, torch.Tensor):
        out = values.detach().to(DTYPE).clone()
    else:
        out = torch.as_tensor(values, dtype=DTYPE).clone()
    if requires_grad:
        out.requires_grad_(True)
    return out


def check_finite(values, what="tensor"):
    '''raise NumericError if *values* holds NaN or Inf.'''
    if not bool(torch.isfinite(values).all()):
        raise NumericError("non-finite values in {}".format(what))
    return values


def safe_norm(x, dim=-1, keepdim=False):
    '''Euclidean norm along *dim* with a zero gradient at the origin.'''
    sq = (x * x).sum(dim=dim, keepdim=keepdim)
    positive = sq > 0
    root = torch.sqrt(torch.where(positive, sq, torch.ones_like(sq)))
    return torch.where(positive, root, torch.zeros_like(sq))


def layer_norm(x, eps=LAYER_NORM_EPS):
    '''normalise the last axis to zero mean and unit variance.'''
    return torch.nn.functional.layer_norm(x, x.shape[-1:], eps=eps)


class Tape:
    '''a recorded differentiable program.

    *program* maps a dict of named tensors to a dict of named output
    tensors (or to a single tensor, exposed as output ``"out"``).
    *placeholders* lists the input names the program expects.
    '''

    def __init__(self, program, placeholders):
        self.program = program
        self.placeholders = tuple(placeholders)

    def _bind(self, inputs, requires_grad):
        missing = set(self.placeholders) - set(inputs)
        extra = set(inputs) - set(self.placeholders)
        if missing or extra:
            raise ValidationError(
                "inputs do not match placeholders: missing {}, unexpected {}"
                .format(sorted(missing), sorted(extra)))
        return {name: as_tensor(inputs[name], requires_grad=requires_grad)
                for name in self.placeholders}

    def run(self, bound):
        try:
            out = self.program(bound)
        except RuntimeError as exc:
            raise ValidationError("shape mismatch: {}".format(exc)) from exc
        if isinstance(out, torch.Tensor):
            out = {"out": out}
        for name, value in out.items():
            check_finite(value, "output {}".format(name))
        return out


def forward(tape, inputs):
    '''evaluate *tape* on *inputs* and return its named outputs.'''
    bound = tape._bind(inputs, requires_grad=False)
    with torch.no_grad():
        return tape.run(bound)


def gradient(tape, inputs, output_node="out", wrt=None):
    '''derivative of the scalar output *output_node* with respect to
    every input named in *wrt* (all placeholders by default).'''
    bound = tape._bind(inputs, requires_grad=True)
    with torch.enable_grad():
        out = tape.run(bound)[output_node]
    if out.numel() != 1:
        raise ValidationError(
            "gradient needs a scalar output, {} has shape {}".format(
                output_node, tuple(out.shape)))
    names = tuple(wrt) if wrt is not None else tape.placeholders
    grads = torch.autograd.grad(out.reshape(()), [bound[n] for n in names],
                                allow_unused=True)
    result = {}
    for name, grad in zip(names, grads):
        if grad is None:
            grad = torch.zeros_like(bound[name])
        result[name] = check_finite(grad.detach(), "gradient of " + name)
    return result


class AdamState:
    '''bias corrected Adam over a fixed list of leaf tensors.'''

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.optimizer = torch.optim.Adam(self.params, lr=lr,
                                          betas=(beta1, beta2), eps=eps,
                                          foreach=False)

    def _moment(self, key):
        return [self.optimizer.state.get(p, {}).get(key, torch.zeros_like(p))
                for p in self.params]

    @property
    def step(self):
        if not self.params:
            return 0
        step = self.optimizer.state.get(self.params[0], {}).get("step", 0)
        return int(step)

    @property
    def first_moment(self):
        return self._moment("exp_avg")

    @property
    def second_moment(self):
        return self._moment("exp_avg_sq")

    def state_dict(self):
        return self.optimizer.state_dict()

    def load_state_dict(self, state):
        self.optimizer.load_state_dict(state)


def adam_step(state, params, grads):
    '''apply one Adam update to *params* given *grads*.

    *params* must be the tensors *state* was created with.  They are
    updated in place and returned together with the state.
    '''
    params = list(params)
    grads = list(grads)
    if len(params) != len(state.params) or len(grads) != len(params):
        raise ValidationError("parameter, gradient and state counts differ")
    for param, registered, grad in zip(params, state.params, grads):
        if param is not registered:
            raise ValidationError("parameters do not belong to this state")
        if tuple(grad.shape) != tuple(param.shape):
            raise ValidationError(
                "gradient shape {} does not match parameter shape {}".format(
                    tuple(grad.shape), tuple(param.shape)))
        param.grad = check_finite(as_tensor(grad), "gradient")
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    return params, state
