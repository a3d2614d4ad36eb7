"""Worker daemon that runs tasks on a client."""
