"""Feature dumps and prompt-plan refinement around the fragseg file contracts."""
