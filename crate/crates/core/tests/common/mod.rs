//! Shared fixtures, reference implementations and a local chat-completion
//! server for integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use reqqda::corpus::Codebook;

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn data_dir() -> PathBuf {
    crate_dir().join("../../data")
}

pub fn fixture(name: &str) -> PathBuf {
    crate_dir().join("tests/fixtures").join(name)
}

pub fn library_codebook() -> Codebook {
    Codebook::load(&data_dir().join("library/codebook.toml")).expect("library codebook")
}

fn toml_path(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

/// Config over the 10-statement fixture corpus with one mock model.
pub fn e2e_config(dir: &Path, mock_script: &Path, n_runs: usize, extra_experiment: &str) -> PathBuf {
    let e2e = fixture("e2e");
    let body = format!(
        "test_case = \"library\"\n\
         corpus = [{corpus}]\n\
         codebook = {codebook}\n\
         gold = {gold}\n\
         output_dir = \"out\"\n\
         \n\
         [experiment]\n\
         n_runs = {n_runs}\n\
         seed = 7\n\
         parallelism = 4\n\
         exemplars = 3\n\
         {extra_experiment}\n\
         \n\
         [[models]]\n\
         model_id = \"mock-a\"\n\
         backend = \"mock\"\n\
         mock_script = {script}\n",
        corpus = toml_path(&e2e.join("corpus.csv")),
        codebook = toml_path(&data_dir().join("library/codebook.toml")),
        gold = toml_path(&e2e.join("gold.csv")),
        script = toml_path(mock_script),
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

/// Cohen's kappa by direct counting. `None` when chance agreement is 1 and
/// observed agreement is not.
pub fn oracle_kappa(pairs: &[(String, String)]) -> Option<f64> {
    let n = pairs.len() as f64;
    let mut left: BTreeMap<&str, f64> = BTreeMap::new();
    let mut right: BTreeMap<&str, f64> = BTreeMap::new();
    let mut agree = 0.0;
    for (a, b) in pairs {
        *left.entry(a).or_default() += 1.0;
        *right.entry(b).or_default() += 1.0;
        if a == b {
            agree += 1.0;
        }
    }
    let p_o = agree / n;
    let p_e: f64 = left
        .iter()
        .map(|(l, c)| c / n * right.get(l).copied().unwrap_or(0.0) / n)
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return if p_o == 1.0 { Some(1.0) } else { None };
    }
    Some((p_o - p_e) / (1.0 - p_e))
}

/// ICC(2,k) from two-way ANOVA mean squares, with the residual obtained as
/// total minus row and column sums of squares.
pub fn oracle_icc(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let k = m[0].len();
    let nf = n as f64;
    let kf = k as f64;
    let grand = m.iter().flatten().sum::<f64>() / (nf * kf);
    let sst: f64 = m.iter().flatten().map(|x| (x - grand).powi(2)).sum();
    let ssr: f64 = m
        .iter()
        .map(|row| (row.iter().sum::<f64>() / kf - grand).powi(2))
        .sum::<f64>()
        * kf;
    let ssc: f64 = (0..k)
        .map(|j| (m.iter().map(|row| row[j]).sum::<f64>() / nf - grand).powi(2))
        .sum::<f64>()
        * nf;
    let sse = sst - ssr - ssc;
    let msr = ssr / (nf - 1.0);
    let msc = ssc / (kf - 1.0);
    let mse = sse / ((nf - 1.0) * (kf - 1.0));
    (msr - mse) / (msr + (msc - mse) / nf)
}

pub fn oracle_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[derive(Debug, Clone)]
pub struct StubRequest {
    /// Header names lowercased.
    pub headers: BTreeMap<String, String>,
    pub body: String,
}

type Handler = dyn Fn(usize, &StubRequest) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server on a random local port. Every response closes
/// its connection.
pub struct StubServer {
    pub url: String,
    requests: Arc<Mutex<Vec<StubRequest>>>,
}

impl StubServer {
    pub fn start(handler: impl Fn(usize, &StubRequest) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = requests.clone();
        let handler: Arc<Handler> = Arc::new(handler);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let Some(request) = read_request(&mut stream) else { continue };
                let index = {
                    let mut seen = seen.lock().unwrap();
                    seen.push(request.clone());
                    seen.len() - 1
                };
                let (status, body) = handler(index, &request);
                let response = format!(
                    "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        StubServer { url, requests }
    }

    pub fn requests(&self) -> Vec<StubRequest> {
        self.requests.lock().unwrap().clone()
    }
}

fn read_request(stream: &mut std::net::TcpStream) -> Option<StubRequest> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut headers = BTreeMap::new();
    loop {
        line.clear();
        reader.read_line(&mut line).ok()?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            break;
        }
        let (name, value) = trimmed.split_once(':')?;
        headers.insert(name.trim().to_ascii_lowercase(), value.trim().to_string());
    }
    let len: usize = headers.get("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(StubRequest {
        headers,
        body: String::from_utf8_lossy(&body).into_owned(),
    })
}

/// A chat-completion response body carrying `content`.
pub fn chat_body(content: &str) -> String {
    serde_json::json!({
        "id": "stub",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]
    })
    .to_string()
}

/// Picks a library label from keywords in the prompt's last line.
pub fn keyword_label(request: &StubRequest) -> &'static str {
    let body: serde_json::Value = serde_json::from_str(&request.body).unwrap_or_default();
    let prompt = body["messages"][0]["content"].as_str().unwrap_or("").to_lowercase();
    let last = prompt.lines().last().unwrap_or("");
    [
        ("search", "Search"),
        ("hold", "Reservation"),
        ("reservation", "Reservation"),
        ("remind", "Notification"),
        ("notify", "Notification"),
        ("fine", "Fine"),
        ("report", "Report"),
        ("loan", "Loan"),
        ("borrow", "Loan"),
        ("catalog", "Catalog"),
    ]
    .iter()
    .find(|(k, _)| last.contains(k))
    .map_or("Account", |(_, l)| l)
}

/// Renders one grid cell with the fixed snapshot inputs and returns
/// (expected golden text, rendered text).
pub fn snapshot_cell(condition: reqqda::prompt::Condition) -> (String, String) {
    use reqqda::corpus::{Exemplar, ExemplarPool, RequirementStatement};
    use reqqda::prompt::{render_prompt, PromptTemplates};

    let codebook = library_codebook();
    let texts: BTreeMap<String, String> = csv::Reader::from_path(data_dir().join("library/corpus.csv"))
        .unwrap()
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string())
        })
        .collect();
    let exemplar = |id: &str, label: &str| Exemplar {
        requirement_id: id.into(),
        text: texts[id].clone(),
        label: label.into(),
    };
    let pool = ExemplarPool {
        exemplars: vec![
            exemplar("LIB-01", "Catalog"),
            exemplar("LIB-05", "Loan"),
            exemplar("LIB-10", "Notification"),
        ],
        seed: 0,
    };
    let requirement = RequirementStatement {
        id: "LIB-14".into(),
        text: texts["LIB-14"].clone(),
        test_case: "library".into(),
        source_doc: "corpus".into(),
    };
    let rendered = render_prompt(&PromptTemplates::builtin(), condition, &requirement, &codebook, &pool)
        .unwrap()
        .text;
    let name = format!(
        "{}_{}_{}.txt",
        condition.shot, condition.length, condition.context
    );
    let expected = std::fs::read_to_string(crate_dir().join("tests/golden").join(name)).unwrap();
    (expected, rendered)
}
