"""Exception hierarchy shared by the library, the dataset layer and the CLI"""


class BagsError(Exception):
    """Base class for every error raised by this project"""


class ShapeError(BagsError, ValueError):
    """Incompatible shapes, broadcast failures and bad axes"""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = tuple(tuple(s) for s in shapes)


class DomainError(BagsError, ValueError):
    """Argument outside the domain of an operation (log of 0, division by 0, ...)"""


class GraphError(BagsError):
    """Misuse of the differentiation graph"""


class SceneError(BagsError):
    pass


class RasterizerError(BagsError):
    pass


class BPNError(BagsError):
    pass


class ScheduleError(BagsError):
    pass


class ConfigError(BagsError, ValueError):
    pass


class DatasetError(BagsError):
    """Malformed dataset; the message always names the file and the field"""

    def __init__(self, path, message: str, field: str = None):
        where = f"{path}" if field is None else f"{path} [{field}]"
        super().__init__(f"{where}: {message}")
        self.path = str(path)
        self.field = field


class CheckpointError(BagsError):
    pass


class TrainingError(BagsError):
    """Wraps a module error raised inside the training loop"""

    def __init__(self, iteration: int, view: int, cause: Exception):
        super().__init__(f"iteration {iteration} (view {view}): {cause}")
        self.iteration = iteration
        self.view = view
