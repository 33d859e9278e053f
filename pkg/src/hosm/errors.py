class DivergenceError(RuntimeError):
    """Numerical blow-up; carries the step index and the last finite state."""

    def __init__(self, message, step=None, state=None):
        super().__init__(message)
        self.step = step
        self.state = state

    @property
    def last_state(self):
        return self.state
