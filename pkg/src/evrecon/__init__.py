"""Event-based video reconstruction with a recurrent network whose first
decoder uses per-pixel dynamic filters generated by a hypernetwork."""

__version__ = "0.1.0"
