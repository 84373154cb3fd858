/**
 * Incremental parser for text/event-stream bytes.
 *
 * The browser app uses EventSource, but the tests (and any headless
 * consumer) feed raw stream chunks through this parser so that replaying a
 * recorded stream exercises exactly the same decoding path.
 */

export interface SseMessage {
  event: string;
  data: string;
}

export class SseParser {
  private buffer = "";
  private eventName = "";
  private dataLines: string[] = [];

  /** Feed a chunk; returns every complete message it finished. */
  push(chunk: string): SseMessage[] {
    this.buffer += chunk;
    const out: SseMessage[] = [];
    let idx: number;
    while ((idx = this.buffer.indexOf("\n")) >= 0) {
      const line = this.buffer.slice(0, idx).replace(/\r$/, "");
      this.buffer = this.buffer.slice(idx + 1);
      if (line === "") {
        if (this.dataLines.length > 0) {
          out.push({
            event: this.eventName || "message",
            data: this.dataLines.join("\n"),
          });
        }
        this.eventName = "";
        this.dataLines = [];
      } else if (line.startsWith(":")) {
        // comment / heartbeat
      } else if (line.startsWith("event:")) {
        this.eventName = line.slice(6).trimStart();
      } else if (line.startsWith("data:")) {
        this.dataLines.push(line.slice(5).replace(/^ /, ""));
      }
      // other fields (id, retry) are irrelevant to the monitor
    }
    return out;
  }
}
