class PlcrevError(Exception):
    """Base error; ``offset`` (file offset) is rendered in hex by the CLI."""

    def __init__(self, message: str = "", offset=None, **details):
        super().__init__(message)
        self.offset = offset
        self.details = details

    def render(self) -> str:
        text = f"{type(self).__name__}: {self}"
        if self.offset is not None:
            text += f" (at {self.offset:#x})"
        return text
