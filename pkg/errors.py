class DegeneratePole(ValueError):
    """Radial projection of ±e is the whole equator."""


class NotStrictlyConvex(ValueError):
    pass


class ZeroMeanCurvature(ValueError):
    pass


class Collapsed(ValueError):
    """Requested time is at or past the collapse time of a shrinking sphere."""


class NotAGraph(ValueError):
    pass


class ChartBreakdown(RuntimeError):
    pass


class StepRejected(RuntimeError):
    pass


class StepFailure(RuntimeError):
    pass


class BoundaryIndex(IndexError):
    pass


class DegenerateFit(ValueError):
    pass


class ScenarioError(ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
