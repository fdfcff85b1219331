"""nbrevive: execute, grade, backport, and modernize ML competition notebooks
until they reproduce their reported score."""

from .agent import (
    FixRecord,
    Scores,
    SessionConfig,
    SessionLog,
    build_prompt,
    classify_issue,
    parse_response,
    run_session,
)
from .backport import (
    EnvironmentSpec,
    Release,
    ReleaseIndex,
    build_environment_spec,
    detect_major,
    emit_requirements,
    extract_dependencies,
    infer_interpreter,
    select_version,
)
from .gateway import HttpGateway, MockGateway, PriceTable, Usage, cost, load_price_table
from .grading import (
    CompetitionSpec,
    ReproOutcome,
    classify,
    classify_outcome,
    compute_metric,
    grade_submission,
    score_deviation,
    validate_submission,
)
from .harness import (
    ContainerExecutor,
    ExecLimits,
    ExecutionReport,
    MockExecutor,
    collect_submission,
)
from .notebook import (
    Cell,
    Notebook,
    apply_patch,
    code_text,
    content_hash,
    count_tokens,
    edit_similarity,
    extract_pip_installs,
    parse_cell_delimited,
    parse_notebook,
    render_cell_delimited,
    serialize_notebook,
)

__version__ = "0.1.0"
