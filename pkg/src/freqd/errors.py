"""Exception types raised across the package."""


class FreqDError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(FreqDError, ValueError):
    pass


class IndexOutOfRange(FreqDError, IndexError):
    pass


class EmptyEmbedding(FreqDError, ValueError):
    pass


class IsolatedNode(FreqDError, ValueError):
    def __init__(self, node):
        self.node = int(node)
        super().__init__(f"node {self.node} has degree 0; prune or connect it first")


class TooLarge(FreqDError, ValueError):
    def __init__(self, n, cap):
        self.n = int(n)
        self.cap = int(cap)
        super().__init__(
            f"{self.n} nodes exceeds the dense spectral cap of {self.cap}; "
            "use the polynomial filter path instead"
        )


class NonMonotoneWeights(FreqDError, ValueError):
    pass


class InvalidFilter(FreqDError, ValueError):
    pass


class NoNegativeAvailable(FreqDError, ValueError):
    def __init__(self, user):
        self.user = int(user)
        super().__init__(f"user {self.user} has interacted with every item")


class NonFiniteLoss(FreqDError, FloatingPointError):
    pass


class ParseError(FreqDError, ValueError):
    def __init__(self, line, message="malformed record"):
        self.line = int(line)
        super().__init__(f"line {self.line}: {message}")


class EmptyFile(FreqDError, ValueError):
    pass


class EmptyAfterFilter(FreqDError, ValueError):
    pass


class TooFewInteractions(FreqDError, ValueError):
    def __init__(self, user, count):
        self.user = int(user)
        self.count = int(count)
        super().__init__(f"user {self.user} has only {self.count} interactions (need >= 3)")


class NotEnoughItems(FreqDError, ValueError):
    pass


class EmptyRelevant(FreqDError, ValueError):
    pass


class CheckpointError(FreqDError, ValueError):
    pass
