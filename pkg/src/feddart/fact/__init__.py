"""FL toolkit: models, aggregation, clustering, stopping criteria, server/client roles."""
