"""Exception hierarchy.

Every error carries a ``category`` used by the CLI to pick an exit code:
``config`` -> 2, ``data`` -> 3, ``solver``/``geometry`` -> 4.
"""


class PanorectError(Exception):
    category = "solver"


class InvalidInputError(PanorectError, ValueError):
    category = "config"


class OutOfDomainError(PanorectError, ValueError):
    category = "data"


class ManifestError(PanorectError):
    category = "data"


class SchemaError(ManifestError):
    pass


class DanglingReferenceError(SchemaError):
    pass


class DisconnectedGraphError(PanorectError):
    category = "data"

    def __init__(self, components):
        self.components = [sorted(c) for c in components]
        super().__init__(f"match graph is disconnected: components {self.components}")


class SimilarityFitError(PanorectError):
    category = "data"


class FixtureError(PanorectError, ValueError):
    category = "config"


class RankDeficiencyError(PanorectError):
    def __init__(self, message, null_directions=()):
        self.null_directions = list(null_directions)
        super().__init__(message)


class ConvergenceError(PanorectError):
    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class GeometryError(PanorectError):
    category = "geometry"


class DisconnectedUnionError(GeometryError):
    pass


class CornerError(GeometryError):
    pass


class StepError(GeometryError):
    pass


class ScaleMismatchError(PanorectError):
    category = "data"
