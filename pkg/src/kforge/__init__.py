"""Per-application kernel specialization toolkit."""
