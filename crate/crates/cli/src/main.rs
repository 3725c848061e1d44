//! `datapeck` command-line tool: generate → run → coverage → report.
//!
//! Exit codes: 0 success, 1 test failures under `--fail-on-test-failure`,
//! 2 configuration error, 3 data/suite mismatch, 4 provider error.

use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use datapeck::frame::{FrameError, StudySpec};
use datapeck::gensuite::{self, GenError, SuiteContext, DEFAULT_MIN_SIMILARITY};
use datapeck::provider::API_KEY_ENV;
use datapeck::report::{self, read_annotations, summarize_quality};
use datapeck::testkit::{results_to_json, GenerationMetadata, TestResult, TestkitError};
use datapeck::vocab::read_vocabulary;
use datapeck::{
    compute_coverage, emit_heatmap, parse_matrix, run_suite, serialize_matrix, CodeBook, EmbeddingIndex,
    HashingEmbedder, HttpProvider, KnowledgeProvider, MockProvider, Status, TestSuite,
};

const EXIT_TESTS: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_MISMATCH: u8 = 3;
const EXIT_PROVIDER: u8 = 4;

#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait ExitContext<T> {
    fn exit(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitContext<T> for Result<T, E> {
    fn exit(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

#[derive(Parser)]
#[command(name = "datapeck", version, about = "Context-aware unit tests for EHR datasets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a test suite from grounded statistics.
    Generate(GenerateArgs),
    /// Run a suite against the study data and write results, coverage and report.
    Run(RunArgs),
    /// Compute column coverage of a suite against the study schema.
    Coverage(CoverageArgs),
    /// Render a report (and optional quality summary) from saved results.
    Report(ReportArgs),
    /// Embed a vocabulary file and save the index.
    BuildIndex(BuildIndexArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Study spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// `mock:<fixture.json>` or `http:<url>`.
    #[arg(long)]
    provider: String,
    /// Vocabulary TSV (concept_id, concept_name, domain_id, vocabulary_id, concept_code).
    #[arg(long)]
    vocabulary: PathBuf,
    /// Prebuilt index from `build-index`; built on the fly when absent.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Minimum cosine similarity for code-list searches.
    #[arg(long, default_value_t = DEFAULT_MIN_SIMILARITY)]
    min_similarity: f64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    /// Study spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Compiled suite JSON.
    #[arg(long, conflicts_with_all = ["matrix", "codes"])]
    suite: Option<PathBuf>,
    /// Suite matrix; requires `--codes`.
    #[arg(long, requires = "codes")]
    matrix: Option<PathBuf>,
    /// Code lists JSON written by `generate`.
    #[arg(long, requires = "matrix")]
    codes: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Md,
    Html,
}

impl FormatArg {
    fn format(self) -> report::Format {
        match self {
            FormatArg::Md => report::Format::Markdown,
            FormatArg::Html => report::Format::Html,
        }
    }

    fn extension(self) -> &'static str {
        match self {
            FormatArg::Md => "md",
            FormatArg::Html => "html",
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "md")]
    format: FormatArg,
    /// Count metadata-level bindings in the heatmap.
    #[arg(long)]
    include_metadata: bool,
    /// Exit with status 1 when any test fails.
    #[arg(long)]
    fail_on_test_failure: bool,
}

#[derive(Args)]
struct CoverageArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    include_metadata: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    /// Results JSON written by `run`.
    #[arg(long)]
    results: PathBuf,
    /// Annotation CSV (`test_name,reference_valid,accuracy`) for the quality summary.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "md")]
    format: FormatArg,
}

#[derive(Args)]
struct BuildIndexArgs {
    #[arg(long)]
    vocabulary: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Run(a) => run(a),
        Command::Coverage(a) => coverage(a),
        Command::Report(a) => report_cmd(a),
        Command::BuildIndex(a) => build_index(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_spec(path: &Path) -> Result<StudySpec, Failure> {
    StudySpec::load(path)
        .with_context(|| format!("cannot load study spec `{}`", path.display()))
        .exit(EXIT_CONFIG)
}

fn write(dir: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create `{}`", dir.display()))
        .exit(EXIT_CONFIG)?;
    let path = dir.join(name);
    fs::write(&path, contents)
        .with_context(|| format!("cannot write `{}`", path.display()))
        .exit(EXIT_CONFIG)?;
    written.push(path);
    Ok(())
}

fn print_written(written: &[PathBuf]) {
    for p in written {
        println!("wrote {}", p.display());
    }
}

fn provider_from(selector: &str) -> Result<Box<dyn KnowledgeProvider>> {
    if let Some(path) = selector.strip_prefix("mock:") {
        return Ok(Box::new(MockProvider::from_file(path)?));
    }
    let url = if selector.starts_with("http://") || selector.starts_with("https://") {
        selector
    } else if let Some(rest) = selector.strip_prefix("http:") {
        rest
    } else {
        return Err(anyhow!("provider must be `mock:<fixture>` or `http:<url>`, got `{selector}`"));
    };
    if url.is_empty() {
        return Err(anyhow!("provider URL is empty"));
    }
    Ok(Box::new(
        HttpProvider::new(url)
            .with_api_key(std::env::var(API_KEY_ENV).ok())
            .with_retry(3, Duration::from_secs(1)),
    ))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn generate(a: GenerateArgs) -> Result<u8, Failure> {
    let spec = load_spec(&a.spec)?;
    let schemas = datapeck::load_schema(spec.schema_path())
        .context("cannot load schema")
        .exit(EXIT_CONFIG)?;
    spec.validate(&schemas).exit(EXIT_CONFIG)?;
    let provider = provider_from(&a.provider).exit(EXIT_CONFIG)?;
    let vocab_bytes = fs::read(&a.vocabulary)
        .with_context(|| format!("cannot read vocabulary `{}`", a.vocabulary.display()))
        .exit(EXIT_CONFIG)?;
    let concepts = read_vocabulary(&a.vocabulary).exit(EXIT_CONFIG)?;
    let embedder = HashingEmbedder::default();
    let index = match &a.index {
        Some(path) => {
            let file = fs::File::open(path)
                .with_context(|| format!("cannot open index `{}`", path.display()))
                .exit(EXIT_CONFIG)?;
            EmbeddingIndex::load(BufReader::new(file), &concepts).exit(EXIT_CONFIG)?
        }
        None => EmbeddingIndex::from_concepts(concepts, &embedder).exit(EXIT_CONFIG)?,
    };
    let frames = match spec.load_frames() {
        Ok((_, frames)) => Some(frames),
        Err(e) => {
            log::warn!("study data not loaded ({e}); demographic targets must be explicit");
            None
        }
    };

    let mut written = Vec::new();
    let generated =
        match gensuite::generate(&spec, provider.as_ref(), &index, &embedder, frames.as_ref(), a.min_similarity) {
            Ok(g) => g,
            Err(GenError::Provider {
                completed,
                total,
                partial,
                source,
            }) => {
                write(&a.out, "suite.psv.partial", &serialize_matrix(&partial), &mut written)?;
                print_written(&written);
                return Err(Failure {
                    code: EXIT_PROVIDER,
                    error: anyhow!("provider failed after validating {completed} of {total} suggestions: {source}"),
                });
            }
            Err(e @ GenError::Fetch(_)) => return Err(e).exit(EXIT_PROVIDER),
            Err(e) => return Err(e).exit(EXIT_CONFIG),
        };
    if generated.statistics == 0 {
        log::warn!("provider returned no statistics; the suite holds only the data-types check");
        eprintln!("warning: provider returned no statistics; the suite holds only the data-types check");
    }

    let metadata = GenerationMetadata {
        provider: provider.identity(),
        vocabulary_checksum: format!("sha256:{}", sha256_hex(&vocab_bytes)),
        generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    let suite = gensuite::compile(
        &generated.suggestions,
        &generated.codes,
        &schemas,
        SuiteContext::from_spec(&spec, metadata),
    )
    .exit(EXIT_CONFIG)?;
    for w in &suite.warnings {
        log::warn!("{w}");
    }

    write(&a.out, "suite.psv", &serialize_matrix(&generated.suggestions), &mut written)?;
    write(&a.out, "codes.json", &generated.codes.to_json().exit(EXIT_CONFIG)?, &mut written)?;
    write(&a.out, "suite.json", &suite.to_json().exit(EXIT_CONFIG)?, &mut written)?;
    println!(
        "statistics: {}, suggested: {}, removed: {}, fixed: {}, cases: {}",
        generated.statistics,
        generated.suggested,
        generated.removed,
        generated.fixed,
        suite.cases.len()
    );
    print_written(&written);
    Ok(0)
}

fn load_suite(a: &SuiteArgs, spec: &StudySpec) -> Result<TestSuite, Failure> {
    if let Some(path) = &a.suite {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read suite `{}`", path.display()))
            .exit(EXIT_CONFIG)?;
        return TestSuite::from_json(&text)
            .with_context(|| format!("invalid suite `{}`", path.display()))
            .exit(EXIT_CONFIG);
    }
    let (Some(matrix), Some(codes)) = (&a.matrix, &a.codes) else {
        return Err(anyhow!("give `--suite` or both `--matrix` and `--codes`")).exit(EXIT_CONFIG);
    };
    let text = fs::read_to_string(matrix)
        .with_context(|| format!("cannot read matrix `{}`", matrix.display()))
        .exit(EXIT_CONFIG)?;
    let suggestions = parse_matrix(&text).exit(EXIT_CONFIG)?;
    let codes_text = fs::read_to_string(codes)
        .with_context(|| format!("cannot read code lists `{}`", codes.display()))
        .exit(EXIT_CONFIG)?;
    let book = CodeBook::from_json(&codes_text)
        .with_context(|| format!("invalid code lists `{}`", codes.display()))
        .exit(EXIT_CONFIG)?;
    let schemas = datapeck::load_schema(spec.schema_path())
        .context("cannot load schema")
        .exit(EXIT_CONFIG)?;
    let metadata = GenerationMetadata {
        provider: format!("matrix:{}", matrix.display()),
        ..GenerationMetadata::default()
    };
    gensuite::compile(&suggestions, &book, &schemas, SuiteContext::from_spec(spec, metadata)).exit(EXIT_MISMATCH)
}

fn frame_failure(e: FrameError) -> Failure {
    let code = match e {
        FrameError::Io { .. } | FrameError::Spec(_) => EXIT_CONFIG,
        _ => EXIT_MISMATCH,
    };
    Failure {
        code,
        error: anyhow::Error::new(e).context("cannot load study data"),
    }
}

fn write_coverage(
    suite: &TestSuite,
    schemas: &[datapeck::TableSchema],
    include_metadata: bool,
    out: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<datapeck::CoverageReport, Failure> {
    let cov = compute_coverage(suite, schemas);
    let heatmap = emit_heatmap(&cov, include_metadata);
    write(out, "coverage.json", &serde_json::to_string_pretty(&cov).exit(EXIT_CONFIG)?, written)?;
    write(out, "heatmap.csv", &heatmap.to_csv(), written)?;
    write(out, "heatmap_long.csv", &heatmap.to_long_csv(), written)?;
    Ok(cov)
}

fn status_line(results: &[TestResult]) -> String {
    let count = |s: Status| results.iter().filter(|r| r.status == s).count();
    format!(
        "Pass: {}, Fail: {}, No Reference: {}, Error: {}",
        count(Status::Pass),
        count(Status::Fail),
        count(Status::NoReference),
        count(Status::Error)
    )
}

fn run(a: RunArgs) -> Result<u8, Failure> {
    let spec = load_spec(&a.suite.spec)?;
    let suite = load_suite(&a.suite, &spec)?;
    let (schemas, frames) = spec.load_frames().map_err(frame_failure)?;
    let results = match run_suite(&suite, &frames) {
        Ok(r) => r,
        Err(e @ TestkitError::Mismatch(_)) => return Err(e).exit(EXIT_MISMATCH),
        Err(e) => return Err(e).exit(EXIT_CONFIG),
    };
    let mut written = Vec::new();
    write(&a.out, "results.json", &results_to_json(&results).exit(EXIT_CONFIG)?, &mut written)?;
    let cov = write_coverage(&suite, &schemas, a.include_metadata, &a.out, &mut written)?;
    let doc = report::render_report(&results, &cov, &suite, a.format.format()).exit(EXIT_MISMATCH)?;
    write(&a.out, &format!("report.{}", a.format.extension()), &doc, &mut written)?;
    println!("{}", status_line(&results));
    println!("coverage: {:.1}% of columns", cov.overall_percent);
    print_written(&written);
    let failed = results.iter().any(|r| r.status != Status::Pass && r.status != Status::NoReference);
    Ok(if a.fail_on_test_failure && failed { EXIT_TESTS } else { 0 })
}

fn coverage(a: CoverageArgs) -> Result<u8, Failure> {
    let spec = load_spec(&a.suite.spec)?;
    let suite = load_suite(&a.suite, &spec)?;
    let schemas = datapeck::load_schema(spec.schema_path())
        .context("cannot load schema")
        .exit(EXIT_CONFIG)?;
    let mut written = Vec::new();
    let cov = write_coverage(&suite, &schemas, a.include_metadata, &a.out, &mut written)?;
    println!("coverage: {:.1}% of columns", cov.overall_percent);
    print_written(&written);
    Ok(0)
}

fn report_cmd(a: ReportArgs) -> Result<u8, Failure> {
    let spec = load_spec(&a.suite.spec)?;
    let suite = load_suite(&a.suite, &spec)?;
    let schemas = datapeck::load_schema(spec.schema_path())
        .context("cannot load schema")
        .exit(EXIT_CONFIG)?;
    let text = fs::read_to_string(&a.results)
        .with_context(|| format!("cannot read results `{}`", a.results.display()))
        .exit(EXIT_CONFIG)?;
    let results: Vec<TestResult> = serde_json::from_str(&text)
        .with_context(|| format!("invalid results `{}`", a.results.display()))
        .exit(EXIT_CONFIG)?;
    let cov = compute_coverage(&suite, &schemas);
    let doc = report::render_report(&results, &cov, &suite, a.format.format()).exit(EXIT_MISMATCH)?;
    let mut written = Vec::new();
    write(&a.out, &format!("report.{}", a.format.extension()), &doc, &mut written)?;
    if let Some(path) = &a.annotations {
        let file = fs::File::open(path)
            .with_context(|| format!("cannot open annotations `{}`", path.display()))
            .exit(EXIT_CONFIG)?;
        let annotations = read_annotations(file).exit(EXIT_CONFIG)?;
        let summary = summarize_quality(&annotations, &results).exit(EXIT_MISMATCH)?;
        write(&a.out, "quality.md", &summary.to_markdown(), &mut written)?;
    }
    print_written(&written);
    Ok(0)
}

fn build_index(a: BuildIndexArgs) -> Result<u8, Failure> {
    let embedder = HashingEmbedder::default();
    let index = EmbeddingIndex::build(&a.vocabulary, &embedder).exit(EXIT_CONFIG)?;
    let mut buf = Vec::new();
    index.save(&mut buf).exit(EXIT_CONFIG)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).exit(EXIT_CONFIG)?;
    }
    fs::write(&a.out, buf)
        .with_context(|| format!("cannot write `{}`", a.out.display()))
        .exit(EXIT_CONFIG)?;
    println!("indexed {} concepts", index.len());
    println!("wrote {}", a.out.display());
    Ok(0)
}
