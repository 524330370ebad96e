"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from typing import Callable

import numpy as np

from latentprog.autodiff import (
    Tape,
    Tensor,
    add,
    backward,
    concat,
    conv2d,
    embedding,
    exp,
    log_softmax,
    matmul,
    mean,
    minimum,
    mul,
    nll,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_last,
    softmax,
    suspend_tape,
    tanh,
    total,
)
from latentprog.exceptions import ConfigurationError, TapeError

__all__ = ["GradCheckReport", "check_parameters", "gradient_check", "gradient_suite"]


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of a central-difference comparison.

    Attributes:
        max_rel_error: Largest |analytic - numeric| / max(|analytic|, |numeric|, floor).
        passed: ``max_rel_error <= rtol``, or the point was not comparable.
        comparable: False when the forward pass touched a non-differentiable
            point (relu input or minimum operand gap within the kink tolerance).
        checked: Number of coordinates compared.
        worst: ``"name[index]"`` of the worst coordinate, if any.
    """

    max_rel_error: float
    passed: bool
    comparable: bool
    checked: int
    worst: str | None = None

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        if not self.comparable:
            status += " (non-comparable point)"
        return (
            f"{status}: max rel err {self.max_rel_error:.3e} over "
            f"{self.checked} coordinates"
            + (f", worst {self.worst}" if self.worst else "")
        )


def _scalar(value: Tensor) -> float:
    if value.data.size != 1:
        raise TapeError(
            f"gradient_check needs a scalar function, got shape {value.shape}"
        )
    return float(value.data.reshape(()))


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    rtol: float = 1e-4,
    *,
    floor: float = 1e-4,
    coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn`` with central differences.

    ``loss_fn`` reads the parameters in place; each checked coordinate is
    perturbed by ±h and restored. With ``coords_per_param`` set, that many
    coordinates per tensor are drawn from ``rng``; otherwise all are checked.
    """
    if h <= 0:
        raise ConfigurationError(f"h must be > 0, got {h}")
    rng = rng if rng is not None else np.random.default_rng(0)

    for param in params.values():
        param.data = np.ascontiguousarray(param.data)
        param.requires_grad = True
        param.grad = None
    with Tape(kink_tolerance=10.0 * h) as tape:
        loss = loss_fn()
    _scalar(loss)
    backward(tape, loss)
    comparable = not tape.kinks

    worst_error, worst_label, checked = 0.0, None, 0
    for name, param in params.items():
        analytic = (
            param.grad if param.grad is not None else np.zeros_like(param.data)
        ).copy()
        flat = param.data.reshape(-1)
        indices = np.arange(flat.size)
        if coords_per_param is not None and coords_per_param < flat.size:
            indices = rng.choice(flat.size, size=coords_per_param, replace=False)
        for index in indices:
            original = flat[index]
            with suspend_tape():
                flat[index] = original + h
                upper = _scalar(loss_fn())
                flat[index] = original - h
                lower = _scalar(loss_fn())
            flat[index] = original
            numeric = (upper - lower) / (2.0 * h)
            exact = analytic.reshape(-1)[index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            checked += 1
            if error > worst_error or worst_label is None:
                worst_error, worst_label = error, f"{name}[{int(index)}]"

    passed = worst_error <= rtol or not comparable
    return GradCheckReport(worst_error, passed, comparable, checked, worst_label)


def gradient_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = 1e-5,
    rtol: float = 1e-4,
    *,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Check the gradient of scalar ``f`` at ``point`` against central differences.

    Examples:
        >>> report = gradient_check(lambda x: total(mul(x, x)), Tensor([1.0, 2.0, 3.0]))
        >>> report.passed
        True
    """
    return check_parameters(lambda: f(point), {"point": point}, h, rtol, floor=floor)


def _projected(op: Callable[..., Tensor], weight: np.ndarray) -> Callable[..., Tensor]:
    def f(*args: Tensor) -> Tensor:
        return total(mul(op(*args), Tensor(weight)))

    return f


def _primitive_cases(
    rng: np.random.Generator
) -> dict[str, tuple[Callable[..., Tensor], list]]:
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    # keep minimum operands and relu inputs away from their kinks
    b = np.where(np.abs(a - b) < 0.1, b + 0.5, b)
    a_relu = np.where(np.abs(a) < 0.1, a + 0.3, a)
    ids = rng.integers(0, 5, size=(6,))
    targets = rng.integers(0, 4, size=(3,))
    image = rng.uniform(size=(2, 6, 6, 3))
    w34 = rng.normal(size=(3, 4))
    return {
        "matmul": (
            _projected(matmul, rng.normal(size=(3, 5))),
            [a, rng.normal(size=(4, 5))],
        ),
        "add": (
            _projected(add, rng.normal(size=(2, 3, 4))),
            [rng.normal(size=(2, 3, 4)), a],
        ),
        "mul": (_projected(mul, w34), [a, b]),
        "scale": (_projected(lambda x: scale(x, -2.5), w34), [a]),
        "sigmoid": (_projected(sigmoid, w34), [a]),
        "tanh": (_projected(tanh, w34), [a]),
        "relu": (_projected(relu, w34), [a_relu]),
        "exp": (_projected(exp, w34), [a]),
        "softmax": (_projected(softmax, w34), [a]),
        "log_softmax": (_projected(log_softmax, w34), [a]),
        "embedding": (
            _projected(lambda t: embedding(t, ids), rng.normal(size=(6, 3))),
            [rng.normal(size=(5, 3))],
        ),
        "conv2d": (
            _projected(lambda x, k: conv2d(x, k, 2), rng.normal(size=(2, 3, 3, 4))),
            [image, rng.normal(size=(2, 2, 3, 4))],
        ),
        "minimum": (_projected(minimum, w34), [a, b]),
        "sum": (lambda x: total(mul(total(x, axis=0), Tensor(w34[0]))), [a]),
        "mean": (lambda x: total(mul(mean(x, axis=1), Tensor(w34[:, 0]))), [a]),
        "concat": (
            _projected(lambda x, y: concat([x, y]), rng.normal(size=(3, 8))),
            [a, b],
        ),
        "slice": (_projected(lambda x: slice_last(x, 1, 3), w34[:, :2]), [a]),
        "reshape": (_projected(lambda x: reshape(x, (4, 3)), w34.reshape(4, 3)), [a]),
        "nll": (lambda x: total(nll(log_softmax(x), targets)), [a]),
    }


def _model_cases(
    rng: np.random.Generator,
) -> dict[str, tuple[Callable[[], Tensor], Mapping[str, Tensor]]]:
    from latentprog.executor import CnnStem, ModuleBank, answer_log_prob
    from latentprog.grammar import default_program_vocab
    from latentprog.sequence import (
        LanguageModel,
        Seq2Seq,
        lm_log_prob,
        seq2seq_log_prob,
    )
    from latentprog.vocab import Vocabulary

    programs = default_program_vocab()
    words = Vocabulary(["is", "there", "a", "red", "circle"])
    prior = LanguageModel(programs, 4, 6, rng)
    sequences = [
        ("answer", "find[red]"),
        ("answer", "and", "find[red]", "find[circle]"),
    ]
    coder = Seq2Seq(words, programs, 4, 6, rng, name="coder")
    questions = [("is", "there", "a", "red"), ("is", "there", "a", "circle")]
    stem = CnnStem(4, rng)
    bank = ModuleBank(programs, 4, rng)
    images = rng.uniform(size=(2, 30, 30, 3))
    program = ("answer", "transform[left]", "find[red]")
    return {
        "prior": (
            lambda: total(lm_log_prob(prior, sequences, max_len=7)),
            prior.parameters(),
        ),
        "seq2seq": (
            lambda: total(seq2seq_log_prob(coder, questions, sequences, max_len=7)),
            coder.parameters(),
        ),
        "executor": (
            lambda: total(answer_log_prob(bank, stem, program, images, ["yes", "no"])),
            {**stem.parameters(), **bank.parameters_for(program)},
        ),
    }


def gradient_suite(
    seed: int = 0, h: float = 1e-5, rtol: float = 1e-4
) -> dict[str, GradCheckReport]:
    """Check every registered primitive and each model's teacher-forced loss."""
    rng = np.random.default_rng(seed)
    reports: dict[str, GradCheckReport] = {}
    for name, (f, arrays) in _primitive_cases(rng).items():
        inputs = {f"x{i}": Tensor(array) for i, array in enumerate(arrays)}
        reports[name] = check_parameters(
            lambda f=f, inputs=inputs: f(*inputs.values()), inputs, h, rtol
        )
    for name, (loss_fn, params) in _model_cases(rng).items():
        reports[name] = check_parameters(
            loss_fn, params, h, rtol, coords_per_param=4, rng=rng
        )
    return reports
