/** Portal bootstrap: session auth form, upload panel, status board. */

import { ApiClient, AuthRequiredError, clearCredentials, loadCredentials, saveCredentials } from "./api.js";
import { StatusBoard } from "./board.js";
import { UploadPanel } from "./upload.js";

function byId(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node;
}

export function bootstrap(baseUrl = ""): void {
  const api = new ApiClient(baseUrl, loadCredentials());
  const authForm = byId("auth-form") as HTMLFormElement;
  const authNote = byId("auth-note");
  const portal = byId("portal");

  let board: StatusBoard | null = null;

  const showAuth = (message = "") => {
    authNote.textContent = message;
    authForm.classList.remove("hidden");
    portal.classList.add("hidden");
    board?.stop();
  };

  const showPortal = () => {
    authForm.classList.add("hidden");
    portal.classList.remove("hidden");
    if (!board) {
      board = new StatusBoard(byId("board-root"), api, {
        onAuthRequired: () => showAuth("session expired; sign in again"),
      });
      new UploadPanel(byId("upload-root"), api, {
        onAuthRequired: () => showAuth("session expired; sign in again"),
        onInspectRequest: (rid) => board?.focusRequest(rid),
      });
    }
    board.start();
  };

  authForm.addEventListener("submit", (e) => {
    e.preventDefault();
    const username = (byId("auth-username") as HTMLInputElement).value.trim();
    const apiKey = (byId("auth-key") as HTMLInputElement).value;
    if (!username || !apiKey) {
      authNote.textContent = "both username and API key are required";
      return;
    }
    const creds = { username, apiKey };
    api.setCredentials(creds);
    api
      .checkAuth()
      .then(() => {
        saveCredentials(creds);
        showPortal();
      })
      .catch((err) => {
        api.setCredentials(null);
        clearCredentials();
        authNote.textContent =
          err instanceof AuthRequiredError ? "rejected: check the username and key" : `cannot reach the API: ${err}`;
      });
  });

  if (api.credentials) {
    showPortal();
  } else {
    showAuth();
  }
}

if (typeof document !== "undefined" && document.readyState !== "loading") {
  bootstrap();
} else if (typeof document !== "undefined") {
  document.addEventListener("DOMContentLoaded", () => bootstrap());
}
