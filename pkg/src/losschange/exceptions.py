class ConfigError(ValueError):
    """Invalid run, optimizer, or architecture configuration."""


class DataFormatError(ValueError):
    """Malformed dataset file or inconsistent labels."""


class IntegrityError(IOError):
    """Truncated, unfinalized, or corrupted binary artifact."""


class NumericError(ArithmeticError):
    """Non-finite value in a forward pass, gradient, or parameter update."""

    def __init__(self, message, iteration=None, layer=None):
        self.iteration = iteration
        self.layer = layer
        ctx = []
        if layer is not None:
            ctx.append(f"layer={layer}")
        if iteration is not None:
            ctx.append(f"iteration={iteration}")
        super().__init__(message + (f" ({', '.join(ctx)})" if ctx else ""))


class LcaGateError(RuntimeError):
    """Cumulative LCA error exceeded the allowed percentage."""

    def __init__(self, message, lca=None, worst_iterations=()):
        super().__init__(message)
        self.lca = lca
        self.worst_iterations = list(worst_iterations)


class ContractError(ValueError):
    """Artifacts that should describe the same run disagree (e.g. K or T)."""
