use std::fmt::Write as _;
use std::path::Path;

use triage_core::analyzers::{parse_training_jsonl, train_severity, SeverityModel};
use triage_core::eval::{
    eval_duplicates, eval_localization, eval_severity, parse_duplicate_pairs, parse_localization_examples,
    parse_severity_examples, reference_localization_ranker, RankingMetricsReport,
};

use crate::{CliError, CliResult, EvalArgs, Task};

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))
}

fn data_err(path: &Path) -> impl Fn(triage_core::eval::EvalError) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

pub fn load_model(path: Option<&Path>) -> Result<SeverityModel, CliError> {
    match path {
        None => Ok(SeverityModel::seed()),
        Some(p) => serde_json::from_str(&read(p)?)
            .map_err(|e| CliError::Data(format!("{}: not a severity model: {e}", p.display()))),
    }
}

pub fn run(args: &EvalArgs) -> CliResult {
    if !(args.threshold > 0.0 && args.threshold < 1.0) {
        return Err(CliError::Usage(format!("--threshold {} is outside (0, 1)", args.threshold)));
    }
    if args.k.is_empty() || args.k.contains(&0) {
        return Err(CliError::Usage("--k values must be positive".into()));
    }
    let text = read(&args.file)?;
    let path = args.file.as_path();
    let report = match args.task {
        Task::Duplicates => {
            let pairs = parse_duplicate_pairs(&text).map_err(data_err(path))?;
            eval_duplicates(&pairs, args.threshold, args.title_repeat).map_err(data_err(path))?
        }
        Task::Severity => {
            let model = load_model(args.model.as_deref())?;
            let examples = parse_severity_examples(&text).map_err(data_err(path))?;
            eval_severity(&examples, &model).map_err(data_err(path))?
        }
        Task::Localization => {
            let examples = parse_localization_examples(&text).map_err(data_err(path))?;
            eval_localization(&examples, reference_localization_ranker(args.title_repeat), &args.k)
                .map_err(data_err(path))?
        }
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", table(&report));
    }
    Ok(())
}

fn table(report: &RankingMetricsReport) -> String {
    let mut out = String::new();
    let mut row = |name: &str, value: String| {
        let _ = writeln!(out, "{name:<12}{value}");
    };
    row("task", report.task.clone());
    row("examples", report.n_examples.to_string());
    row("accuracy", format!("{:.4}", report.accuracy));
    if let Some(p) = report.precision {
        row("precision", format!("{p:.4}"));
    }
    if let Some(r) = report.recall {
        row("recall", format!("{r:.4}"));
    }
    for (k, v) in &report.precision_at_k {
        row(&format!("P@{k}"), format!("{v:.4}"));
    }
    for (k, v) in &report.recall_at_k {
        row(&format!("R@{k}"), format!("{v:.4}"));
    }
    if let Some(m) = report.map_score {
        row("MAP", format!("{m:.4}"));
    }
    if !report.flags.is_empty() {
        row("flags", report.flags.join(", "));
    }
    out
}

pub fn train(file: &Path, out: Option<&Path>, title_repeat: usize) -> CliResult {
    let examples = parse_training_jsonl(&read(file)?).map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
    let model = train_severity(&examples, title_repeat).map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
    for (class, n) in &model.trained_on {
        println!("{:<10}{n}", class.name());
    }
    if let Some(out) = out {
        let json = serde_json::to_string(&model).expect("model serializes");
        std::fs::write(out, json).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", out.display())))?;
        println!("model written to {}", out.display());
    }
    Ok(())
}
