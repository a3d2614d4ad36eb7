"""HTTP task server: state, request handling, journal."""
