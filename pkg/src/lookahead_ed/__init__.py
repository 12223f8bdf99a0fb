"""Look-ahead AC economic dispatch with a guarded DDPG agent."""
