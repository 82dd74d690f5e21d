# Frame-Event Flow Toolkit