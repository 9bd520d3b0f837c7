pub const SCHEMA: &str = r#"
CREATE TABLE IF NOT EXISTS users (
    name        TEXT PRIMARY KEY,
    role        TEXT NOT NULL CHECK (role IN ('expert', 'annotator')),
    token       TEXT NOT NULL UNIQUE
);

CREATE TABLE IF NOT EXISTS slides (
    name          TEXT PRIMARY KEY,
    width         INTEGER NOT NULL,
    height        INTEGER NOT NULL,
    scale_factor  REAL NOT NULL,
    pyramid_dir   TEXT NOT NULL,
    tile_size     INTEGER NOT NULL,
    overlap       INTEGER NOT NULL,
    tile_format   TEXT NOT NULL,
    patch_grid    TEXT NOT NULL
);

CREATE TABLE IF NOT EXISTS batches (
    name   TEXT PRIMARY KEY,
    dense  INTEGER NOT NULL DEFAULT 0
);

CREATE TABLE IF NOT EXISTS batch_slides (
    batch_name  TEXT NOT NULL REFERENCES batches(name),
    slide_name  TEXT NOT NULL REFERENCES slides(name),
    position    INTEGER NOT NULL,
    PRIMARY KEY (batch_name, slide_name)
);

CREATE TABLE IF NOT EXISTS batch_users (
    batch_name  TEXT NOT NULL REFERENCES batches(name),
    user_name   TEXT NOT NULL REFERENCES users(name),
    PRIMARY KEY (batch_name, user_name)
);

CREATE TABLE IF NOT EXISTS annotations (
    id              INTEGER PRIMARY KEY AUTOINCREMENT,
    batch_name      TEXT NOT NULL,
    user_name       TEXT NOT NULL,
    slide_name      TEXT NOT NULL,
    kind            TEXT NOT NULL,
    geometry        TEXT NOT NULL,
    label           TEXT NOT NULL,
    source          TEXT NOT NULL,
    validation      TEXT,
    line_color      TEXT NOT NULL,
    line_thickness  REAL NOT NULL,
    fill_color      TEXT NOT NULL,
    fill_opacity    REAL NOT NULL,
    created_at      INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS annotations_view ON annotations (batch_name, user_name, slide_name);

CREATE TABLE IF NOT EXISTS wsi_labels (
    slide_name    TEXT NOT NULL,
    user_name     TEXT NOT NULL,
    class_label   TEXT NOT NULL,
    certainty     INTEGER NOT NULL CHECK (certainty BETWEEN 0 AND 100),
    observations  TEXT NOT NULL,
    PRIMARY KEY (slide_name, user_name)
);

CREATE TABLE IF NOT EXISTS sessions (
    id          INTEGER PRIMARY KEY AUTOINCREMENT,
    user_name   TEXT NOT NULL,
    slide_name  TEXT NOT NULL,
    batch_name  TEXT NOT NULL,
    opened_at   INTEGER NOT NULL,
    closed_at   INTEGER NOT NULL CHECK (closed_at >= opened_at)
);

CREATE TABLE IF NOT EXISTS session_opens (
    user_name   TEXT NOT NULL,
    slide_name  TEXT NOT NULL,
    batch_name  TEXT NOT NULL,
    opened_at   INTEGER NOT NULL,
    PRIMARY KEY (user_name, slide_name, batch_name)
);

CREATE TABLE IF NOT EXISTS predictions (
    slide_name  TEXT NOT NULL,
    x           INTEGER NOT NULL,
    y           INTEGER NOT NULL,
    prob        REAL NOT NULL,
    PRIMARY KEY (slide_name, x, y)
);
"#;
