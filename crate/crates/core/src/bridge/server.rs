//! WebSocket endpoint: one thread accepts, one thread per client.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use tungstenite::{Message, WebSocket};

use super::hub::{ClientQueue, Hub, InputHandoff};
use crate::error::{Error, Result};

const POLL: Duration = Duration::from_millis(2);

/// Listening bridge. Dropping it stops the accept loop and disconnects
/// every client.
pub struct BridgeServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    hub: Arc<Hub>,
    accept: Option<JoinHandle<()>>,
}

impl BridgeServer {
    /// Binds `listen` and starts accepting. `current_tick` stamps error
    /// replies.
    pub fn start(listen: &str, hub: Arc<Hub>, handoff: Arc<InputHandoff>, current_tick: Arc<AtomicU64>) -> Result<Self> {
        let listener =
            TcpListener::bind(listen).map_err(|e| Error::Bridge(format!("cannot listen on {listen}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| Error::Bridge(e.to_string()))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::Bridge(format!("cannot configure listener: {e}")))?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let stop = stop.clone();
            let hub = hub.clone();
            std::thread::Builder::new()
                .name("bridge-accept".into())
                .spawn(move || accept_loop(listener, stop, hub, handoff, current_tick))
                .map_err(|e| Error::Bridge(e.to_string()))?
        };
        Ok(Self {
            addr,
            stop,
            hub,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }
}

impl Drop for BridgeServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        self.hub.close_all();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn accept_loop(
    listener: TcpListener,
    stop: Arc<AtomicBool>,
    hub: Arc<Hub>,
    handoff: Arc<InputHandoff>,
    tick: Arc<AtomicU64>,
) {
    let mut clients = Vec::new();
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let (stop, hub, handoff, tick) = (stop.clone(), hub.clone(), handoff.clone(), tick.clone());
                let spawned = std::thread::Builder::new()
                    .name(format!("bridge-{peer}"))
                    .spawn(move || {
                        if let Err(e) = serve_client(stream, &stop, &hub, &handoff, &tick) {
                            log::debug!("client {peer} closed: {e}");
                        }
                    });
                match spawned {
                    Ok(h) => clients.push(h),
                    Err(e) => log::warn!("cannot start client thread: {e}"),
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => log::warn!("accept failed: {e}"),
        }
        clients.retain(|h| !h.is_finished());
    }
    for h in clients {
        let _ = h.join();
    }
}

fn serve_client(
    stream: TcpStream,
    stop: &AtomicBool,
    hub: &Hub,
    handoff: &InputHandoff,
    tick: &AtomicU64,
) -> std::result::Result<(), String> {
    stream.set_nonblocking(false).map_err(|e| e.to_string())?;
    stream.set_nodelay(true).map_err(|e| e.to_string())?;
    stream
        .set_read_timeout(Some(Duration::from_secs(5)))
        .map_err(|e| e.to_string())?;
    let mut ws = tungstenite::accept(stream).map_err(|e| e.to_string())?;
    ws.get_ref().set_read_timeout(Some(POLL)).map_err(|e| e.to_string())?;
    let queue = hub.subscribe();
    let result = client_loop(&mut ws, &queue, stop, handoff, tick);
    queue.close();
    let _ = ws.close(None);
    let _ = ws.flush();
    result
}

fn client_loop(
    ws: &mut WebSocket<TcpStream>,
    queue: &ClientQueue,
    stop: &AtomicBool,
    handoff: &InputHandoff,
    tick: &AtomicU64,
) -> std::result::Result<(), String> {
    while !stop.load(Ordering::Relaxed) && !queue.is_closed() {
        for text in queue.drain() {
            ws.send(Message::Text(text)).map_err(|e| e.to_string())?;
        }
        match ws.read() {
            Ok(Message::Text(text)) => {
                if let Err(reply) = handoff.receive(&text, tick.load(Ordering::Relaxed)) {
                    ws.send(Message::Text(reply.to_json())).map_err(|e| e.to_string())?;
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed) => return Ok(()),
            Err(e) => return Err(e.to_string()),
        }
    }
    Ok(())
}
