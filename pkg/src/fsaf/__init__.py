"""Feature selective anchor-free detection machinery."""
