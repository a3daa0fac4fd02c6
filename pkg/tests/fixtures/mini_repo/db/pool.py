from db.engine import Db

_POOL = {}


def acquire_connection(cfg):
    """Hand out a shared open handle per dsn, creating it on first use."""
    dsn = cfg.get("dsn", "memory")
    if dsn not in _POOL:
        _POOL[dsn] = Db.connect(cfg)
    return _POOL[dsn]
