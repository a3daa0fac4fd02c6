def load_and_query(path, table):
    """Load settings from path, open the database, and fetch rows from table."""
    cfg = parse_config(path)
    db = Db.connect(cfg)
    return run_query(db, table)
