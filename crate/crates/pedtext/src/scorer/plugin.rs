//! Out-of-process scorer protocol.
//!
//! One JSON object per line in each direction, UTF-8, `\n`-terminated.
//!
//! Request: `{"kind":"image"|"text","id":"<string>","payload":"<string>"}`.
//! For `image` the payload is the standard padded base64 encoding of the raw
//! image bytes; for `text` it is the prompt itself.
//!
//! Response: `{"id":"<same id>","vector":[f64, ...]}` on success or
//! `{"id":"<same id>","error":"<message>"}` on failure. Requests are answered
//! strictly in order. Vectors need not be normalised; the client normalises
//! them.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{EmbeddingVector, ImageRecord, ScorerBackend};
use crate::error::{Error, Result};
use crate::ontology::PromptText;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginRequest {
    pub kind: RequestKind,
    pub id: String,
    pub payload: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginResponse {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Channel {
    writer: Box<dyn Write + Send>,
    reader: Box<dyn BufRead + Send>,
    counter: u64,
}

/// Client side of the plugin protocol. Requests are serialised through a
/// mutex, so the backend can be shared between generation workers.
pub struct PluginBackend {
    name: String,
    dimension: usize,
    channel: Mutex<Channel>,
    child: Option<Mutex<Child>>,
}

impl PluginBackend {
    pub fn from_streams(
        name: impl Into<String>,
        dimension: usize,
        writer: Box<dyn Write + Send>,
        reader: Box<dyn BufRead + Send>,
    ) -> Self {
        Self {
            name: name.into(),
            dimension,
            channel: Mutex::new(Channel {
                writer,
                reader,
                counter: 0,
            }),
            child: None,
        }
    }

    /// Starts `program args...` and talks to it over its stdin/stdout.
    pub fn spawn(program: &str, args: &[String], dimension: usize) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start plugin {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let mut backend =
            Self::from_streams(program, dimension, Box::new(stdin), Box::new(BufReader::new(stdout)));
        backend.child = Some(Mutex::new(child));
        Ok(backend)
    }

    fn request(&self, kind: RequestKind, id: Option<&str>, payload: String) -> Result<EmbeddingVector> {
        let mut ch = self.channel.lock().expect("plugin channel poisoned");
        ch.counter += 1;
        let id = id.map_or_else(|| format!("t{}", ch.counter), str::to_owned);
        let req = PluginRequest {
            kind,
            id: id.clone(),
            payload,
        };
        let mut line = serde_json::to_string(&req)?;
        line.push('\n');
        ch.writer.write_all(line.as_bytes())?;
        ch.writer.flush()?;
        let mut reply = String::new();
        if ch.reader.read_line(&mut reply)? == 0 {
            return Err(Error::Backend("plugin closed its output".into()));
        }
        let resp: PluginResponse = serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::Backend(format!("malformed plugin response: {e}")))?;
        if resp.id != id {
            return Err(Error::Backend(format!(
                "plugin answered {} for request {id}",
                resp.id
            )));
        }
        if let Some(message) = resp.error {
            return Err(Error::Input { id, message });
        }
        let vector = resp
            .vector
            .ok_or_else(|| Error::Backend(format!("plugin response {id} has no vector")))?;
        if vector.len() != self.dimension {
            return Err(Error::Backend(format!(
                "plugin returned dimension {}, expected {}",
                vector.len(),
                self.dimension
            )));
        }
        EmbeddingVector::normalized(vector).map_err(|e| Error::Input {
            id,
            message: e.to_string(),
        })
    }
}

impl Drop for PluginBackend {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            if let Ok(mut c) = child.lock() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

impl ScorerBackend for PluginBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_image(&self, image: &ImageRecord) -> Result<EmbeddingVector> {
        let payload = base64::engine::general_purpose::STANDARD.encode(&image.bytes);
        self.request(RequestKind::Image, Some(&image.id), payload)
    }

    fn embed_text(&self, prompt: &PromptText) -> Result<EmbeddingVector> {
        if prompt.as_str().is_empty() {
            return Err(Error::Input {
                id: "<prompt>".into(),
                message: "empty prompt".into(),
            });
        }
        self.request(RequestKind::Text, None, prompt.as_str().to_owned())
    }
}

/// Server side: answers requests from `input` with `backend` until EOF.
pub fn serve_plugin(backend: &dyn ScorerBackend, input: impl BufRead, mut output: impl Write) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: PluginRequest = serde_json::from_str(&line)?;
        let result = match req.kind {
            RequestKind::Image => base64::engine::general_purpose::STANDARD
                .decode(&req.payload)
                .map_err(|e| Error::Input {
                    id: req.id.clone(),
                    message: format!("bad base64: {e}"),
                })
                .and_then(|bytes| backend.embed_image(&ImageRecord::new(req.id.clone(), bytes))),
            RequestKind::Text => backend.embed_text(&PromptText::new(req.payload.clone())),
        };
        let resp = match result {
            Ok(v) => PluginResponse {
                id: req.id,
                vector: Some(v.into_vec()),
                error: None,
            },
            Err(e) => PluginResponse {
                id: req.id,
                vector: None,
                error: Some(e.to_string()),
            },
        };
        serde_json::to_writer(&mut output, &resp)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::MockBackend;
    use std::io::{Read, Write};
    use std::sync::mpsc;

    /// In-memory pipe pair connecting a client to a server thread.
    struct Pipe(mpsc::Sender<Vec<u8>>);
    impl Write for Pipe {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.send(buf.to_vec()).map_err(|_| std::io::ErrorKind::BrokenPipe)?;
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
    struct PipeReader(mpsc::Receiver<Vec<u8>>, Vec<u8>);
    impl Read for PipeReader {
        fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
            if self.1.is_empty() {
                match self.0.recv() {
                    Ok(chunk) => self.1 = chunk,
                    Err(_) => return Ok(0),
                }
            }
            let n = buf.len().min(self.1.len());
            buf[..n].copy_from_slice(&self.1[..n]);
            self.1.drain(..n);
            Ok(n)
        }
    }

    fn connected(server: MockBackend) -> PluginBackend {
        let (to_server, server_in) = mpsc::channel();
        let (server_out, from_server) = mpsc::channel();
        let dim = server.dimension();
        std::thread::spawn(move || {
            let input = BufReader::new(PipeReader(server_in, Vec::new()));
            serve_plugin(&server, input, Pipe(server_out)).unwrap();
        });
        PluginBackend::from_streams(
            "loopback",
            dim,
            Box::new(Pipe(to_server)),
            Box::new(BufReader::new(PipeReader(from_server, Vec::new()))),
        )
    }

    fn close(a: &EmbeddingVector, b: &EmbeddingVector) -> bool {
        a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn loopback_matches_in_process_backend() {
        let mock = MockBackend::new(7, 16);
        let plugin = connected(mock.clone());
        let prompt = PromptText::new("A photo of a person with long hair");
        assert!(close(&plugin.embed_text(&prompt).unwrap(), &mock.embed_text(&prompt).unwrap()));
        let img = ImageRecord::new("img_001", vec![0, 1, 2, 255]);
        assert!(close(&plugin.embed_image(&img).unwrap(), &mock.embed_image(&img).unwrap()));
    }

    #[test]
    fn server_errors_become_input_errors() {
        let plugin = connected(MockBackend::new(7, 16));
        let err = plugin.embed_image(&ImageRecord::new("empty", Vec::new())).unwrap_err();
        assert!(matches!(err, Error::Input { ref id, .. } if id == "empty"), "{err}");
    }

    #[test]
    fn wire_format() {
        let req = PluginRequest {
            kind: RequestKind::Text,
            id: "t1".into(),
            payload: "A photo of a man".into(),
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"kind":"text","id":"t1","payload":"A photo of a man"}"#
        );
        let resp = PluginResponse {
            id: "t1".into(),
            vector: Some(vec![1.0, 0.5]),
            error: None,
        };
        assert_eq!(serde_json::to_string(&resp).unwrap(), r#"{"id":"t1","vector":[1.0,0.5]}"#);
    }
}
