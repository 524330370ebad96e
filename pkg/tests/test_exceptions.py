"""Test exception hierarchy and error handling."""

import pytest

from latentprog import (
    CheckpointError,
    CheckpointIntegrityError,
    CheckpointMismatchError,
    ConfigurationError,
    DatasetError,
    ExecutionError,
    FrozenParameterError,
    GrammarError,
    LatentProgError,
    NumericError,
    PipelineError,
    ProgramParseError,
    ProgramStructureError,
    ShapeError,
    TapeError,
    TrainingError,
    UnknownTokenError,
    Verdict,
    default_program_vocab,
    load_config,
    parse_to_tree,
)


class TestExceptionHierarchy:
    """Test exception inheritance and base class."""

    def test_all_exceptions_inherit_from_base(self):
        """Every package exception derives from LatentProgError."""
        exceptions = [
            ConfigurationError,
            ShapeError,
            NumericError,
            TapeError,
            FrozenParameterError,
            GrammarError,
            ExecutionError,
            DatasetError,
            CheckpointError,
            TrainingError,
            PipelineError,
        ]
        for exc_class in exceptions:
            assert issubclass(exc_class, LatentProgError)
            assert issubclass(exc_class, Exception)

    def test_grammar_subclasses(self):
        for exc_class in (UnknownTokenError, ProgramParseError, ProgramStructureError):
            assert issubclass(exc_class, GrammarError)

    def test_checkpoint_subclasses(self):
        assert issubclass(CheckpointIntegrityError, CheckpointError)
        assert issubclass(CheckpointMismatchError, CheckpointError)


class TestExceptionPayloads:
    """Structured attributes carried by exceptions."""

    def test_unknown_token_carries_token_and_position(self):
        err = UnknownTokenError("find[pink]", 3)
        assert err.token == "find[pink]"
        assert err.position == 3
        assert "find[pink]" in str(err)

    def test_parse_error_carries_verdict(self):
        verdict = Verdict(False, 2, "tree completed before position 2")
        err = ProgramParseError(verdict)
        assert err.verdict is verdict
        assert "tree completed" in str(err)

    def test_mismatch_lists_differences(self):
        err = CheckpointMismatchError("does not match", ["program vocab: a vs b"])
        assert err.differences == ["program vocab: a vs b"]
        assert "program vocab: a vs b" in str(err)

    def test_mismatch_without_differences(self):
        err = CheckpointMismatchError("does not match")
        assert err.differences == []
        assert str(err) == "does not match"


class TestRaisedFromLibrary:
    """Library entry points raise the documented classes."""

    def test_parse_raises_parse_error(self):
        with pytest.raises(ProgramParseError):
            parse_to_tree(("find[red]",), default_program_vocab())

    def test_unknown_token_is_catchable_as_base(self):
        with pytest.raises(LatentProgError):
            parse_to_tree(("answer", "find[pink]"), default_program_vocab())

    def test_bad_override_raises_configuration_error(self):
        with pytest.raises(ConfigurationError, match="alpha"):
            load_config(overrides={"hyperparams.alpha": 0.5})
