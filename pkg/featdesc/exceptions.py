class FeatDescError(Exception):
    """Base class for every error raised by featdesc."""

    exit_code = 1


# ── Loading ─────────────────────────────────────────────────────────────────────

class LoadError(FeatDescError):
    pass


class MissingTensor(LoadError):
    def __init__(self, name: str, path: str = ""):
        self.name = name
        super().__init__(f"Tensor '{name}' not found in weight container {path}".strip())


class ShapeMismatch(LoadError):
    def __init__(self, name: str, expected, actual):
        self.name = name
        self.expected = tuple(expected) if isinstance(expected, (tuple, list)) else expected
        self.actual = tuple(actual) if isinstance(actual, (tuple, list)) else actual
        super().__init__(f"Shape mismatch for '{name}': expected {self.expected}, got {self.actual}")


# ── Inputs ──────────────────────────────────────────────────────────────────────

class InputError(FeatDescError):
    pass


class EmptyInput(InputError):
    pass


class TokenOutOfRange(InputError):
    pass


class SequenceTooLong(InputError):
    pass


class TokenizationError(InputError):
    pass


class DimensionMismatch(FeatDescError):
    pass


class FeatureIndexError(FeatDescError):
    pass


# ── Index ───────────────────────────────────────────────────────────────────────

class FeatureNotIndexed(FeatDescError):
    pass


class EmptyCorpus(FeatDescError):
    pass


class UnknownHookSite(FeatDescError):
    pass


# ── Pipeline ────────────────────────────────────────────────────────────────────

class PreconditionError(FeatDescError):
    pass


class DependencyError(FeatDescError):
    pass


class ParseError(FeatDescError):
    pass


class CalibrationFailed(FeatDescError):
    def __init__(self, message: str, max_kl: float):
        self.max_kl = max_kl
        super().__init__(f"{message} (max achieved KL {max_kl:.4f})")


# ── LLM gateway ─────────────────────────────────────────────────────────────────

class GatewayError(FeatDescError):
    pass


class GatewayConfigError(GatewayError):
    exit_code = 2


class GatewayRequestError(GatewayError):
    def __init__(self, status_code: int, body: str):
        self.status_code = status_code
        self.body = body
        super().__init__(f"LLM endpoint rejected the request ({status_code}): {body}")


class GatewayTransportError(GatewayError):
    pass


# ── CLI ─────────────────────────────────────────────────────────────────────────

class ConfigError(FeatDescError):
    exit_code = 2


class GuardError(FeatDescError):
    exit_code = 2
