import re

import numpy as np

import latentprog


def test_package_exposes_semantic_version() -> None:
    version = latentprog.__version__
    assert isinstance(version, str)
    assert re.match(r"^\d+\.\d+\.\d+(?:[+-][0-9A-Za-z.-]+)?$", version)


def test_quickstart_imports_available() -> None:
    vocab = latentprog.default_program_vocab()
    program = latentprog.simulate_program(vocab, np.random.default_rng(0))
    assert latentprog.is_valid_program(program, vocab)
    scene = latentprog.Scene.from_objects([(0, 0, "circle", "red")])
    result = latentprog.symbolic_execute(("answer", "find[red]"), scene, vocab)
    assert result.answer == "yes"


def test_all_names_resolve() -> None:
    for name in latentprog.__all__:
        assert hasattr(latentprog, name), name
